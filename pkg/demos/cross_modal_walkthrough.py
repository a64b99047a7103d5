"""Train one late-stage model on the cross-modal XOR task and look inside it.

    python demos/cross_modal_walkthrough.py [epochs]

Prints the single-stream ceilings, test accuracy, router weights per adapted
layer and the fusion weights, then repeats the run with the cross-modal
adapter removed.
"""

import sys
from pathlib import Path

from molt import load_config, train
from molt.synthdata import single_stream_bayes_bound
from molt.trainer import dataset_for

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "cross_modal.json")
cfg = cfg.replace(**{"optim.epochs": epochs})

data = dataset_for(cfg)
for stream in ("audio", "visual", "both"):
    print(f"best accuracy from {stream:6s} factors: {single_stream_bayes_bound(data, stream):.3f}")

_, rec = train(cfg, data)
print(f"\n1 UDA + 1 CDA, late layers {cfg.adapted_layers}: test {rec.test_accuracy:.3f}")
for layer, w in rec.mean_router_weights.items():
    print(f"  router at layer {layer}: UDA {w[0]:.2f}  CDA {w[1]:.2f}")
for m, a in rec.mean_alpha.items():
    print(f"  {m} fusion weights: " + "  ".join(f"{x:.2f}" for x in a))

_, uda = train(cfg.replace(**{"fdm.n_cda": 0}), data)
print(f"\nUDA only: test {uda.test_accuracy:.3f}")
