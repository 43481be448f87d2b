"""Uplink cost in MB for a sweep of compression ratios."""
import argparse

from fedspa.engine import bits_to_mb, comm_cost_bits


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d", type=int, default=21840, help="model dimension")
    ap.add_argument("--T", type=int, default=45, help="rounds")
    ap.add_argument("--r", type=float, default=0.1, help="agent sampling rate")
    ap.add_argument("--p", type=float, nargs="+", default=[0.05, 0.1, 0.4, 1.0])
    args = ap.parse_args()
    print(f"{'p':>6}  {'bits':>12}  {'MB':>8}")
    for p in args.p:
        bits = comm_cost_bits(p, args.d, args.T, args.r)
        print(f"{p:>6g}  {bits:>12.0f}  {bits_to_mb(bits):>8.4f}")


if __name__ == "__main__":
    main()
