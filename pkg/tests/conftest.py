from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from tiltflow.net import Arch, load_checkpoint, save_checkpoint
from tiltflow.training import TrainConfig, train, write_report_csv

REF_SEED = 7
REF_CONFIG = TrainConfig(seed=REF_SEED)  # paper-scale settings


def cache_dir() -> Path:
    root = os.environ.get("TILTFLOW_CACHE")
    if root:
        return Path(root)
    return Path(__file__).resolve().parents[1] / ".cache"


def small_arch(**kw) -> Arch:
    base = dict(depth=3, hidden=8, tap=2, proj_hidden=8, feat_dim=2)
    base.update(kw)
    return Arch(**base)


@pytest.fixture(scope="session")
def reference():
    """Paper-scale trained model, trained once and cached on disk."""
    ref = cache_dir() / "reference"
    ckpt = ref / "model.ckpt"
    losses_csv = ref / "losses.csv"
    if not (ckpt.exists() and losses_csv.exists()):
        ref.mkdir(parents=True, exist_ok=True)
        print(f"\n[reference] training at paper settings (seed {REF_SEED}); "
              f"this is a one-time cost, cached in {ref}", file=sys.stderr)
        t0 = time.time()

        def progress(epoch, ld, la):
            if epoch % 10 == 0 or epoch == 1:
                print(f"[reference] epoch {epoch}/{REF_CONFIG.epochs} "
                      f"loss_diff={ld:.5f} loss_align={la:.5f} "
                      f"({time.time() - t0:.0f}s)", file=sys.stderr)

        params, report = train(REF_CONFIG, on_epoch=progress)
        save_checkpoint(params, ckpt, extra_header={"config": REF_CONFIG.to_dict()})
        write_report_csv(report, losses_csv)
        meta = {
            "seed": REF_SEED,
            "config": REF_CONFIG.to_dict(),
            "wall_seconds": report.wall_seconds,
            "checkpoint_sha256": hashlib.sha256(ckpt.read_bytes()).hexdigest(),
            "last_epoch_loss_diff": report.loss_diff[-1],
            "last_epoch_loss_align": report.loss_align[-1],
        }
        (ref / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    params = load_checkpoint(ckpt)
    rows = [line.split(",") for line in losses_csv.read_text().splitlines()[1:] if line]
    loss_diff = np.array([float(r[1]) for r in rows])
    loss_align = np.array([float(r[2]) for r in rows])
    return {
        "params": params,
        "ckpt": ckpt,
        "loss_diff": loss_diff,
        "loss_align": loss_align,
        "dir": ref,
    }
