"""Single-image throughput of FCN-7c with 1, 2 and 3 pyramid scales.

    python3 scripts/benchmark_fps.py --height 768 --width 1024 --runs 3
"""
import argparse

from pyramidcount.evaluation import benchmark_fps
from pyramidcount.network import PyramidModel

VARIANTS = [("FCN-7c", (1.0,), "fixed"),
            ("FCN-7c-2s", (1.0, 0.7), "adaptive"),
            ("FCN-7c-3s", (1.0, 0.7, 0.5), "adaptive")]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--height", type=int, default=768)
    ap.add_argument("--width", type=int, default=1024)
    ap.add_argument("--runs", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1,
                    help="BLAS threads (0 leaves the library default)")
    args = ap.parse_args()
    threads = args.threads or None
    print(f"{'model':<12} {'scales':<16} fps ({args.width}x{args.height})")
    for name, scales, mode in VARIANTS:
        model = PyramidModel("FCN-7c", scales, mode)
        fps = benchmark_fps(model, (args.height, args.width), args.runs, threads=threads)
        print(f"{name:<12} {str(scales):<16} {fps:.4g}")


if __name__ == "__main__":
    main()
