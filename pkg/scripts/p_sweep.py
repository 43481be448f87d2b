"""Privacy as a function of the compression ratio.

For each p: epsilon at a fixed sigma, and the sigma needed to meet a target epsilon.
"""
import argparse
import math

from fedspa.accountant import AccountantParams, calibrate_sigma, min_epsilon, min_epsilon_series
from fedspa.errors import CalibrationError, NoFeasibleAlpha


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--q", type=float, default=1e-3)
    ap.add_argument("--B", type=int, default=10)
    ap.add_argument("--G", type=float, default=1.0)
    ap.add_argument("--tau", type=int, default=300)
    ap.add_argument("--I", type=int, default=5, help="participation count")
    ap.add_argument("--delta", type=float, default=1e-3)
    ap.add_argument("--sigma", type=float, default=math.sqrt(0.02))
    ap.add_argument("--target-epsilon", type=float, default=4.0)
    ap.add_argument("--p", type=float, nargs="+", default=[0.05, 0.1, 0.4, 1.0])
    args = ap.parse_args()

    print(f"{'p':>6}  {'eps closed':>10}  {'eps series':>10}  {'sigma@target':>12}")
    for p in args.p:
        params = AccountantParams(B=args.B, q=args.q, sigma=args.sigma, p=p, G=args.G, tau=args.tau,
                                  participation=args.I, delta=args.delta)
        try:
            closed = f"{min_epsilon(params)[1]:10.4f}"
        except NoFeasibleAlpha:
            closed = f"{'n/a':>10}"
        series = min_epsilon_series(params)[1]
        try:
            sig = f"{calibrate_sigma(args.target_epsilon, params):12.4f}"
        except CalibrationError:
            sig = f"{'unreachable':>12}"
        print(f"{p:>6g}  {closed}  {series:10.4f}  {sig}")


if __name__ == "__main__":
    main()
