"""MNIST mini-run: held-out reconstruction MSE per epoch against the best constant image."""
import argparse

from rnp.data import load_idx
from rnp.experiments import MiniRunConfig, mnist_minirun


def main() -> None:
    d = MiniRunConfig()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("images")
    ap.add_argument("labels")
    ap.add_argument("--train", type=int, default=d.train)
    ap.add_argument("--heldout", type=int, default=d.heldout)
    ap.add_argument("--epochs", type=int, default=d.epochs)
    ap.add_argument("--lr", type=float, default=d.lr)
    ap.add_argument("--seed", type=int, default=d.seed)
    args = ap.parse_args()

    ds = load_idx(args.images, args.labels)
    res = mnist_minirun(ds, MiniRunConfig(train=args.train, heldout=args.heldout, epochs=args.epochs,
                                          lr=args.lr, seed=args.seed))
    for e, m in enumerate(res.epoch_mse, start=1):
        print(f"epoch {e}: held-out mse {m:.5f}")
    print(f"constant-image mse {res.constant_mse:.5f}; non-monotone epochs {res.non_monotone}; "
          f"{res.seconds:.0f}s")


if __name__ == "__main__":
    main()
