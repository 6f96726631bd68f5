"""Unbalanced synthetic IR protocol (50 leaks vs 8000 clean).

Trains ConvNet and AddNet with and without 50% dropout plus DiscGAN for each
seed and prints sensitivity / specificity.
"""
import argparse

import numpy as np

from mdnet import data as D
from mdnet import gan
from mdnet import layers as L
from mdnet import presets
from mdnet import training as T
from mdnet.tensor import make_rng


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--leak", type=int, default=50)
    p.add_argument("--clean", type=int, default=8000)
    p.add_argument("--test", type=int, default=4000, help="test instances per class")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--adversarial-epochs", type=int, default=300)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--skip-dropout", action="store_true")
    args = p.parse_args()
    test_set = D.gen_ir_dataset(D.IrSynthConfig(seed=2), args.test, args.test)
    models = [("convnet", False, 0.0), ("addnet", True, 0.0)]
    if not args.skip_dropout:
        models += [("convnet-do50", False, 0.5), ("addnet-do50", True, 0.5)]
    results = {name: [] for name, _, _ in models}
    results["discgan"] = []
    for seed in range(args.seeds):
        train_set = D.gen_ir_dataset(D.IrSynthConfig(seed=100 + seed), args.leak, args.clean)
        cfg = T.TrainConfig(epochs=args.epochs, crop_length=32, seed=seed)
        for name, md, rate in models:
            spec = presets.ir_convnet(md=md, dropout_rate=rate)
            _, rep = T.train(spec, L.init_network(spec, make_rng(seed)), train_set, test_set, cfg)
            results[name].append((rep.specificity, rep.sensitivity))
        gcfg = gan.GanConfig(adversarial_epochs=args.adversarial_epochs, seed=seed)
        _, _, rep, _ = gan.train_discgan(presets.ir_convnet(), train_set, test_set, gcfg, cfg)
        results["discgan"].append((rep.specificity, rep.sensitivity))
        print(f"seed {seed}: " + ", ".join(f"{k} {100 * v[-1][1]:.1f}" for k, v in results.items()), flush=True)
    print("\nmodel          specificity  sensitivity  (mean over seeds)")
    for name, vals in results.items():
        spec_, sens = np.mean(vals, axis=0)
        print(f"{name:14s} {100 * spec_:10.2f} {100 * sens:11.2f}")


if __name__ == "__main__":
    main()
