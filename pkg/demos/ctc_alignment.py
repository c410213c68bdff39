"""
Scoring loosely ordered windows with CTC
========================================

Each query window gets a distribution over the episode classes plus a blank.
The CTC likelihood sums over every window labelling that collapses to the
target, so the class may occupy any subset of windows in any position.
"""
import numpy as np

from atomic_fsl import Tensor, backward, beam_search_decode, classify_by_likelihood, combined_loss, ctc_loss
from atomic_fsl.ctc import LossConfig

# three windows, classes {0, 1}, blank is the last column
probs = np.array([[0.6, 0.1, 0.3],
                  [0.2, 0.1, 0.7],
                  [0.7, 0.1, 0.2]])

# a single-label target: paths like "0 - 0", "- - 0", "0 0 -" all collapse to [0]
for target in ([0], [1], [0, 0]):
    print(target, "-log p =", round(ctc_loss(Tensor(probs), target).item(), 5))

# classification picks the class whose one-symbol target is most likely
label, scores = classify_by_likelihood(probs)
print("predicted class", label, "per-class log likelihood", np.round(scores, 4))
print("beam search decoding", beam_search_decode(probs, beam_width=4))

# the training objective adds an MSE pull of every window towards the one-hot label
dist = Tensor(probs, requires_grad=True)
loss, ctc, mse = combined_loss(dist, [0], LossConfig(lam=0.5))
backward(loss)
print(f"ctc {ctc:.4f} + 0.5 * mse {mse:.4f} = {loss.item():.4f}")
print("gradient wrt window probabilities\n", np.round(dist.grad, 4))
