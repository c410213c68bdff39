"""
Momentum-contrast pretraining of the window encoder
===================================================

Two augmented views of the same video should embed close together, and far
from keys of other videos kept in a queue. The key encoder trails the query
encoder as an exponential moving average.
"""
import numpy as np

from atomic_fsl import AugmentationPolicy, MoCoState, WindowSpec, generate_dataset, init_encoder, momentum_update
from atomic_fsl.contrastive import pretrain_step

ds, _ = generate_dataset(num_classes=12, videos_per_class=8, dim=16)
encoder = init_encoder(ds.dim, channels=16, out_dim=16, rng=np.random.default_rng(0))

# the moving average closes the key/query gap geometrically
key, query = encoder.copy(), init_encoder(ds.dim, channels=16, out_dim=16, rng=np.random.default_rng(1))
gap0 = np.abs(key.parameters()[0].data - query.parameters()[0].data).max()
for _ in range(50):
    momentum_update(key, query, 0.9)
gap = np.abs(key.parameters()[0].data - query.parameters()[0].data).max()
print(f"gap after 50 updates {gap:.3e}, predicted {0.9 ** 50 * gap0:.3e}")

state = MoCoState.create(encoder, queue_size=64, m=0.99, tau=0.2)
spec, policy = WindowSpec(16, 8), AugmentationPolicy()
rng = np.random.default_rng(1)
for step in range(120):
    batch = [ds.videos[i] for i in rng.choice(len(ds.videos), size=8, replace=False)]
    stats = pretrain_step(state, batch, spec, policy, seed=[0, step])
    if step % 20 == 0 or step == 119:
        print(f"step {step:3d} loss {stats['loss']:.3f} positive cosine {stats['pos_sim']:.3f} "
              f"retrieval {stats['retrieval']:.2f} queue {stats['queue_fill']}")
