"""Inspect the latent space a trained dynamic model has learned.

Trains one model on the modeling protocol (all timesteps visible), pulls
its author trajectories, and runs the analysis toolkit: average pairwise
cosine through time against the label-entropy series, self-similarity
trajectories, top movers against stayers, and a 2-D PCA of all latents.
"""

from authorlm.analysis import (
    avg_cosine_series,
    dominant_label,
    extract_trajectories,
    label_entropy_series,
    project_trajectories,
    self_similarity,
    top_movers,
)
from authorlm.model import ModelConfig
from authorlm.splits import make_split
from authorlm.synth import generate_corpus, make_drift_spec
from authorlm.train import TrainConfig, fit

spec = make_drift_spec(
    num_authors=12, num_timesteps=8, vocab_size=120, docs_per_cell=20,
    doc_length=8, num_topics=2, drift_rate=1.0, seed=7,
    topic_exponent=1.5, concentration=0.35, endpoint_style="mixed",
)
corpus = generate_corpus(spec)
split = make_split(corpus, "modeling", seed=0)

mcfg = ModelConfig(variant="ours", d_embed=40, d_hidden=40, d_static=12,
                   d_dynamic=12, mlp_hidden=12, dropout_input=0.05,
                   dropout_output=0.05, dropout_weight=0.1,
                   lambda_consec=0.05, lambda_author=1e-4, lambda_dyn=1e-4)
tcfg = TrainConfig(batch_size=64, lr=0.003, const_iters=2000, decay_iters=500,
                   max_iters=2500, eval_every=500, seed=0, precision="f32")
print("training the dynamic model on the modeling protocol ...")
ckpt, _ = fit(corpus, split, mcfg, tcfg)
traj = extract_trajectories(ckpt.model, corpus.author_names)

print("\naverage pairwise cosine between authors vs label entropy:")
entropy = dict(label_entropy_series(corpus))
for t, cos in avg_cosine_series(traj):
    print(f"  t={t:2d}  cos {cos:+.3f}   label entropy {entropy.get(t, float('nan')):.3f}")

print("\ntop movers (largest change between first and last latent):")
for rank, (a, c) in enumerate(top_movers(traj, 3, "most"), start=1):
    labels = [dominant_label(corpus, a, t) or "-" for t in range(1, corpus.num_timesteps + 1)]
    print(f"  #{rank} {traj.author_names[a]} end-cosine {c:+.3f}  labels {labels}")
print("most stable:")
for rank, (a, c) in enumerate(top_movers(traj, 3, "least"), start=1):
    labels = [dominant_label(corpus, a, t) or "-" for t in range(1, corpus.num_timesteps + 1)]
    print(f"  #{rank} {traj.author_names[a]} end-cosine {c:+.3f}  labels {labels}")

mover = top_movers(traj, 1, "most")[0][0]
print(f"\nself-similarity of the top mover ({traj.author_names[mover]}):")
for t, value in self_similarity(traj, mover):
    print(f"  t={t:2d}  cos(h_1, h_t) = {value:+.3f}")

cells, fractions = project_trajectories(traj)
print(f"\n2-D PCA of all (author, timestep) latents "
      f"(explained variance {fractions[0]:.2f} + {fractions[1]:.2f}):")
for a in (0, 1):  # one stayer, one drifter
    xs = [(x, y) for aa, t, x, y in cells if aa == a]
    path = " -> ".join(f"({x:+.2f},{y:+.2f})" for x, y in xs[:4])
    print(f"  {traj.author_names[a]}: {path} ...")
