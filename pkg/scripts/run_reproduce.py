"""Run the full pipeline and print an ID vs OOD table.

    python scripts/run_reproduce.py [--config cfg.yaml] [--output runs] [--skip-collect]

Equivalent to ``quadwm reproduce`` plus a compact table read back from
``summary.json``; the exit code is the one ``reproduce`` returns.
"""

import argparse
import json
import sys
from pathlib import Path

from quadwm.cli import main
from quadwm.config import load_config
from quadwm.types import GROUPS


def table(summary: dict) -> str:
    lines = [f"{'model':<8} {'dataset':<11} " + " ".join(f"{g:>9}" for g in GROUPS)]
    for kind, res in summary["results"].items():
        for name, r in res.items():
            lines.append(f"{kind:<8} {name:<11} " + " ".join(f"{r['rmse'][g]:9.4f}" for g in GROUPS))
            if "divergence" in r:
                lines.append(f"{'':<8} {'  D':<11} " + " ".join(f"{r['divergence'][g]:9.2f}" for g in GROUPS))
    lines.append("acceptance: " + ("PASS" if summary["acceptance"]["passed"] else "FAIL"))
    return "\n".join(lines)


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--output")
    p.add_argument("--skip-collect", action="store_true")
    args = p.parse_args(argv)
    cli = ["-v", "reproduce"]
    for flag in ("config", "output"):
        if getattr(args, flag):
            cli += [f"--{flag}", getattr(args, flag)]
    if args.skip_collect:
        cli.append("--skip-collect")
    code = main(cli)
    cfg = load_config(args.config)
    if args.output:
        cfg.output_dir = args.output
    path = Path(cfg.output_root()) / "reports" / cfg.run_id / "summary.json"
    if path.exists():
        print(table(json.loads(path.read_text())))
    return code


if __name__ == "__main__":
    sys.exit(run())
