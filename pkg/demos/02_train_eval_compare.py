"""Train the conditioned model and its baselines, then compare them.

Uses the prediction protocol: each author's latest documents are held
out, so doing well requires extrapolating author representations past
the training horizon. Prints micro/macro perplexity for each variant and
the per-timestep gain of the dynamic model over the plain LSTM.
"""

import numpy as np

from authorlm.evaluate import evaluate_split, gain_series
from authorlm.model import ModelConfig
from authorlm.splits import make_split, verify_split
from authorlm.synth import generate_corpus, make_drift_spec, oracle_cross_entropy
from authorlm.train import TrainConfig, fit

spec = make_drift_spec(
    num_authors=12, num_timesteps=8, vocab_size=120, docs_per_cell=20,
    doc_length=8, num_topics=2, drift_rate=1.0, seed=7,
    topic_exponent=1.5, concentration=0.35, endpoint_style="mixed",
)
corpus = generate_corpus(spec)
split = make_split(corpus, "prediction", seed=0)
assert verify_split(corpus, split) == []

test_cells = sorted({(corpus.documents[i].author, corpus.documents[i].time)
                     for i in split.indices("test")})
floor = float(np.exp(oracle_cross_entropy(spec, test_cells)))
print(f"test-cell entropy floor: perplexity {floor:.2f}\n")

base = dict(d_embed=40, d_hidden=40, d_static=12, d_dynamic=12, mlp_hidden=12,
            dropout_input=0.05, dropout_output=0.05, dropout_weight=0.1,
            lambda_consec=0.05, lambda_author=1e-4, lambda_dyn=1e-4)
tcfg = TrainConfig(batch_size=64, lr=0.003, const_iters=2000, decay_iters=500,
                   max_iters=2500, eval_every=250, seed=0, precision="f32")

reports = {}
for variant in ("lstm", "lstm-a", "lstm-at", "ours"):
    print(f"training {variant} ...")
    ckpt, log = fit(corpus, split, ModelConfig(variant=variant, **base), tcfg)
    reports[variant] = evaluate_split(ckpt.model, corpus, split, subset="test")
    best = min(row[2] for row in log)
    print(f"  best val ppl {best:.2f} at iteration {ckpt.iteration}")

print(f"\n{'variant':10s} {'micro':>8s} {'macro':>8s}   (floor {floor:.2f})")
for variant, rep in reports.items():
    print(f"{variant:10s} {rep.micro_ppl:8.2f} {rep.macro_ppl:8.2f}")

print("\nper-timestep gain of the dynamic model over the plain LSTM")
print("(test timesteps only; positive = conditioned model better)")
for t, gain in gain_series(reports["ours"], reports["lstm"]):
    bar = "+" * max(0, int(gain * 4)) or "."
    print(f"  t={t:2d}  {gain:+6.2f}  {bar}")
