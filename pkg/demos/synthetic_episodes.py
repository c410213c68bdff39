"""
Synthetic atomic-action videos and few-shot episodes
====================================================

Each class owns a few motifs (short feature trajectories). A video strings
together some of them in random order, time-stretched, between background
filler. Episodes draw K classes from one side of a class-disjoint split.
"""
import tempfile
from pathlib import Path

from atomic_fsl import generate_dataset, make_split, nearest_prototype_accuracy, read_dataset, sample_episode
from atomic_fsl import write_dataset

ds, bank = generate_dataset(num_classes=20, videos_per_class=12)
split = make_split(ds.num_classes, num_test=6, seed=0)
print(f"{len(ds)} videos, dim {ds.dim}, lengths {min(v.length for v in ds.videos)}"
      f"-{max(v.length for v in ds.videos)} frames")
print("train classes", split.train, "\ntest classes", split.test)

ep = sample_episode(ds, split.test, K=3, N=5, Qn=3, seed=7)
print("episode classes", ep.class_ids, "support sizes", [len(s) for s in ep.support],
      "query labels", ep.query_labels.tolist())

# averaging frames throws away motif order; this is the bar a sequence model should beat
print("mean-feature nearest prototype accuracy",
      round(nearest_prototype_accuracy(ds, split.test, episodes=200), 3))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "toy.afsd"
    write_dataset(path, ds)
    back = read_dataset(path)
    print(f"wrote {path.stat().st_size} bytes, read back {len(back)} videos")
