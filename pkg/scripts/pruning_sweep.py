"""Accuracy vs compression rate for ConvNet and AddNet."""
import argparse

from mdnet import compress as C
from mdnet import data as D
from mdnet import layers as L
from mdnet import presets
from mdnet import training as T
from mdnet.tensor import make_rng


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--magnitude", choices=("mean", "unit", "both"), default="both")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    train_set = D.gen_ir_dataset(D.IrSynthConfig(seed=args.seed + 1), 8000, 8000)
    test_set = D.gen_ir_dataset(D.IrSynthConfig(seed=args.seed + 2), 4000, 4000)
    mags = ("mean", "unit") if args.magnitude == "both" else (args.magnitude,)
    print("model    m     " + " ".join(f"{r:>6.1f}" for r in C.TABLE_RATES))
    for name, md in (("convnet", False), ("addnet", True)):
        spec = presets.ir_convnet(md=md)
        cfg = T.TrainConfig(epochs=args.epochs, crop_length=32, seed=args.seed)
        state, _ = T.train(spec, L.init_network(spec, make_rng(args.seed)), train_set, test_set, cfg)
        for mag in mags:
            accs = []
            for rate in C.TABLE_RATES:
                cs = C.prune_sign_retain(state, C.fraction_for_rate(rate / 100), spec, magnitude=mag)
                accs.append(100 * T.evaluate(spec, cs.reconstruct(), test_set).total_accuracy)
            print(f"{name:8s} {mag:5s} " + " ".join(f"{a:6.1f}" for a in accs), flush=True)


if __name__ == "__main__":
    main()
