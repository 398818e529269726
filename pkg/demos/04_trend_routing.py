"""Mann-Kendall regimes and which series expert each regime is routed to."""
import numpy as np

from dualgate.analysis import RoutingLog, chi_square_independence, format_crosstab, mk_test, routing_crosstab
from dualgate.data import SyntheticSpec, chrono_split, make_synthetic, make_windows, stack_windows
from dualgate.model import ModelConfig
from dualgate.textenc import EmbeddingStore, TextSource
from dualgate.train import TrainConfig, evaluate, train_loop

for series in ([1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [3.0, 1.0, 2.0, 0.0]):
    r = mk_test(series)
    print(f"{series}: S={r.s_stat} Var(S)={r.var_s:.4f} Z={r.z:.4f} -> {r.regime.label}")

data = make_synthetic(SyntheticSpec(seed=0))
windows = stack_windows(make_windows(data.series, 32, 8))
train, val, test = chrono_split(windows)
text = TextSource.from_store(EmbeddingStore(data.series.timestamps, data.embeddings))

# top-1 series routing keeps the expert/regime table well defined
cfg = ModelConfig(lookback=32, horizon=8, patch_len=8, n_series_experts=4, k_series=1)
ckpt, _ = train_loop(cfg, TrainConfig(lr=1e-3, max_epochs=3), train, val, text)
log = RoutingLog()
evaluate(ckpt, test, text, log=log)
regimes = np.array([[int(mk_test(w[:, 0]).regime)] for w in test.x_in])
table = routing_crosstab(log, regimes, "series", 0)
stat, dof = chi_square_independence(table)
print(format_crosstab(table))
print(f"chi-square {stat:.1f} on {dof} degrees of freedom")
