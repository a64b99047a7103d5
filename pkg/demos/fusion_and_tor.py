"""Fusion weights that follow the input, and what the orthogonality term does.

    python demos/fusion_and_tor.py

On the layered-signal task the label lives at layer 7 for one marker value
and at layer 8 for the other; the mlp fuser learns to route by marker.
Then the audio-only task is trained with and without the orthogonality
penalty and the token cosine matrices are compared.
"""

from pathlib import Path

import numpy as np

from molt import load_config, train
from molt.trainer import dataset_for, mean_token_cosines, run_eval

configs = Path(__file__).resolve().parent.parent / "configs"

# seed 0 also routes by marker, but to the decoy layer
cfg = load_config(configs / "layered.json").replace(seed=2)
data = dataset_for(cfg)
model, rec = train(cfg, data)
ev = run_eval(model, data, "test")
marker = data.factors["marker"][data.split("test")]
print(f"layered-signal, mlp fusion: test {rec.test_accuracy:.3f}, top alpha on the signal layer for "
      f"{rec.extras['signal_layer_top_alpha_rate']:.0%} of test examples")
for m in (1, 0):
    a = ev.alpha["audio"][marker == m].mean(axis=0)
    print(f"  marker={m}: alpha(layer 7)={a[0]:.2f} alpha(layer 8)={a[1]:.2f}")

np.set_printoptions(precision=2, suppress=True)
for lam in (0.0, 0.1):
    cfg = load_config(configs / "audio_only.json").replace(lambda_tor=lam)
    model, rec = train(cfg)
    cos = mean_token_cosines(model, dataset_for(cfg))["audio"]
    print(f"\nlambda={lam}: test {rec.test_accuracy:.3f}, mean off-diagonal |cos| "
          f"{rec.mean_offdiag_cosine['audio']:.3f}")
    print(np.abs(cos))
