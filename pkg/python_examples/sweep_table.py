#!/usr/bin/env python3
"""
Continuation Sweep Example

Runs the sweep described in tent_sweep.toml through the CLI entry point
and summarizes the resulting table with pandas.
"""

import sys
from pathlib import Path

import pandas as pd

from transport_energy.cli import main as cli_main

HERE = Path(__file__).resolve().parent


def main():
    print("(lambda, delta) continuation sweep")
    print("=" * 50)

    out = HERE / "out" / "tent_sweep"
    status = cli_main(["run", str(HERE / "tent_sweep.toml"), "--output-dir", str(out)])
    if status != 0:
        print(f"sweep failed with exit status {status}")
        return status

    table = pd.read_csv(out / "sweep.csv")
    print(f"\n{len(table)} cells written to {out / 'sweep.csv'}")
    print(table[["lambda", "delta", "E_total", "steps", "dw_to_oracle"]].to_string(index=False))

    print("\nd_w to the closed form at the end of each lambda chain:")
    print(table.groupby("lambda", sort=False)["dw_to_oracle"].last().to_string())
    return 0


if __name__ == "__main__":
    sys.exit(main())
