"""Balanced synthetic IR task: ConvNet vs AddNet."""
import argparse

from mdnet import data as D
from mdnet import layers as L
from mdnet import presets
from mdnet import training as T
from mdnet.tensor import make_rng


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--train", type=int, default=8000, help="instances per class")
    p.add_argument("--test", type=int, default=4000, help="instances per class")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    train_set = D.gen_ir_dataset(D.IrSynthConfig(seed=args.seed + 1), args.train, args.train)
    test_set = D.gen_ir_dataset(D.IrSynthConfig(seed=args.seed + 2), args.test, args.test)
    print("model    clean   leak    total")
    for name, md in (("convnet", False), ("addnet", True)):
        spec = presets.ir_convnet(md=md, dropout_rate=args.dropout)
        cfg = T.TrainConfig(epochs=args.epochs, crop_length=32, seed=args.seed)
        _, rep = T.train(spec, L.init_network(spec, make_rng(args.seed)), train_set, test_set, cfg)
        print(f"{name:8s} {100 * rep.specificity:6.2f} {100 * rep.sensitivity:6.2f} {100 * rep.total_accuracy:6.2f}")


if __name__ == "__main__":
    main()
