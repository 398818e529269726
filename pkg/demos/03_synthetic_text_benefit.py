"""Train on the synthetic benchmark with and without the text-gated branch.

The text at each step announces the regime of the next segment, which the
lookback window cannot see, so the text-gated model should forecast better.
Pass a number of epochs as the first argument (default 10).
"""
import sys
import time

import numpy as np

from dualgate.data import SyntheticSpec, chrono_split, make_synthetic, make_windows, stack_windows
from dualgate.model import ModelConfig, param_count
from dualgate.textenc import EmbeddingStore, TextSource
from dualgate.train import TrainConfig, evaluate, train_loop

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
data = make_synthetic(SyntheticSpec(seed=0))
print(data.docs[40].text)
windows = stack_windows(make_windows(data.series, 32, 8))
train, val, test = chrono_split(windows)
text = TextSource.from_store(EmbeddingStore(data.series.timestamps, data.embeddings))
print(f"{len(windows)} windows: {len(train)} train, {len(val)} val, {len(test)} test")

# single runs are noisy (early stopping can fire after a lucky epoch), so compare medians
medians = {}
for ablation in ("none", "no_tmoe"):
    scores = []
    for seed in range(3):
        cfg = ModelConfig(lookback=32, horizon=8, patch_len=8, ablation=ablation, seed=seed)
        t0 = time.perf_counter()
        ckpt, hist = train_loop(cfg, TrainConfig(lr=1e-3, max_epochs=epochs, seed=seed), train, val, text)
        m = evaluate(ckpt, test, text)
        scores.append(m["mse"])
        print(f"{ablation:8s} seed {seed}  params {param_count(cfg):6d}  best epoch {hist.best_epoch + 1:2d}  "
              f"test mse {m['mse']:.4f}  mae {m['mae']:.4f}  ({time.perf_counter() - t0:.1f}s)")
    medians[ablation] = float(np.median(scores))
print(f"median test mse: with text {medians['none']:.4f}, without {medians['no_tmoe']:.4f}, "
      f"ratio {medians['none'] / medians['no_tmoe']:.3f}")
