"""CLI: render one figure kind from an engine export directory."""

from __future__ import annotations

import argparse
import sys


def build_parser():
    parser = argparse.ArgumentParser(prog="gka-plots")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("render", help="render one figure kind from an export tree")
    p.add_argument("--kind", required=True,
                   choices=["rollout", "sigma", "cls", "patch", "raw", "evolution"])
    p.add_argument("--in", dest="indir", required=True, help="engine export directory")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--image", default=None, help="grayscale PGM to blend under heatmaps")
    p.add_argument("--dpi", type=int, default=150)
    return parser


def main(argv=None):
    args = build_parser().parse_args(sys.argv[1:] if argv is None else argv)
    from .render import FigureJob, MissingExportError, render

    job = FigureJob(indir=args.indir, kind=args.kind, out_path=args.out,
                    dpi=args.dpi, image=args.image)
    try:
        out = render(job)
    except (MissingExportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
