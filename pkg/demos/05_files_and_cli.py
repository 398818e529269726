"""Checkpoint and embedding files, then the same pipeline through the command line."""
import json
import tempfile
from pathlib import Path

import numpy as np

from dualgate.cli import main
from dualgate.model import ModelConfig, init_params
from dualgate.textenc import read_embeddings, write_embeddings
from dualgate.train import load_checkpoint, save_checkpoint

work = Path(tempfile.mkdtemp(prefix="dualgate-demo-"))

cfg = ModelConfig()
save_checkpoint(work / "init.ckpt", init_params(cfg), cfg)
params, cfg2 = load_checkpoint(work / "init.ckpt")
print(f"checkpoint: {(work / 'init.ckpt').stat().st_size} bytes, {len(params)} arrays, config equal: {cfg2 == cfg}")

write_embeddings(work / "e.bin", [(100, np.ones(4)), (200, np.arange(4.0))])
store = read_embeddings(work / "e.bin")
print(f"embeddings: {(work / 'e.bin').stat().st_size} bytes, timestamps {store.timestamps.tolist()}")

(work / "cfg.json").write_text(json.dumps({
    "seed": 0,
    "model": {"k_series": 1},
    "train": {"lr": 1e-3, "max_epochs": 2},
}))
common = ["--config", str(work / "cfg.json"), "--data", str(work / "data"), "--out", str(work / "runs")]
main(["make-synthetic", "--config", str(work / "cfg.json"), "--out", str(work / "data")])
main(["train", *common])
main(["eval", *common])
main(["routing-report", *common])
main(["mk-test", "--input", str(work / "data" / "series.csv"), "--column", "v1"])
print("outputs under", work)
