"""
U-NetD smoke run. It:
- Builds a U-NetD and fixes its spatial filters with GHaar kernels
- Prints the parameter breakdown against the reference total
- Runs a forward pass on a dummy image and prints the output shape
- Writes the network pair and its spectra to ./smoke-unetd
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from steerfix.engine import predict
from steerfix.explainsteer import explain_network, write_reports
from steerfix.loader import save_network
from steerfix.model import build_unetd, unetd_reference_report
from steerfix.netgraph import apply_initializer, initializer_specs
from steerfix.utils import get_logger

OUT = Path("smoke-unetd")


def main() -> None:
    get_logger(logging.INFO)
    net = build_unetd(seed=0)
    net = apply_initializer(net, initializer_specs(net, "ghaar", seed=0))

    summary = unetd_reference_report(net)
    print("Parameters:", summary)
    for block, (count, spatial) in net.parameter_breakdown().items():
        print(f"  {block:<6} {count:>7} params, {spatial:>5} spatial")

    x = np.random.default_rng(0).random((1, 1, 64, 64), dtype=np.float32)
    y = predict(net, x)
    print("Output shape:", tuple(y.shape))
    assert y.shape == (1, 1, 64, 64), f"Unexpected output shape {y.shape}"

    save_network(net, OUT / "net")
    write_reports(explain_network(net), OUT / "explain")
    print("U-NetD smoke run passed.")


if __name__ == "__main__":
    main()
