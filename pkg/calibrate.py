"""Scratch calibration of desk-scale cohort difficulty (not part of the package)."""
import time

import numpy as np

from gazeauth.experiments import (
    ExperimentConfig,
    Protocol,
    make_longitudinal_cohort,
    run_protocol,
)
from gazeauth.gaze_io import TaskKind
from gazeauth.gbt import GbtConfig
from gazeauth.densenet import DenseNetConfig
from gazeauth.preprocess import WindowConfig
from gazeauth.training import SplitSpec, TrainConfig
from gazeauth.transformer import TransformerConfig

T = 125
config = ExperimentConfig(
    window=WindowConfig(window_len=T),
    split=SplitSpec(train_fraction=0.8),
    train=TrainConfig(epochs=200, batch_size=32, learning_rate=0.001,
                      target_train_accuracy=0.999),
    transformer=TransformerConfig(seq_len=T),
    densenet=DenseNetConfig(),
    gbt=GbtConfig(n_rounds=50, early_stop_train_loss=1e-3),
)

for drift in (0.8, 0.0):
    print(f"=== drift {drift} ===")
    recs, desc = make_longitudinal_cohort(
        8, tasks=[TaskKind.RAN], drift_magnitude=drift, seed=7, duration_s=6.0
    )
    print(f"cohort: {len(recs)} recordings")
    accs = {}
    for protocol in (Protocol.SHORT_TERM, Protocol.LONG_TERM, Protocol.RETRAINED):
        t0 = time.perf_counter()
        report = run_protocol(
            recs, protocol, config=config, seed=11,
            tasks=[TaskKind.ALL], dataset_descriptor=desc,
        )
        dt = time.perf_counter() - t0
        row = report.cells["All"]
        accs[protocol.value] = row
        print(f"{protocol.value:10s} {dt:6.1f}s  " +
              "  ".join(f"{m}={v:.3f}" for m, v in row.items()))
    for m in ("densenet", "transformer", "gbt"):
        s, l, r = accs["short"][m], accs["long"][m], accs["retrained"][m]
        print(f"  {m}: long/short={l/s:.3f}  retr/short={r/s:.3f}")
