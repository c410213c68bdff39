"""Few-shot action recognition from loosely aligned atomic actions, on numpy.

Videos are frame-feature sequences cut into sliding windows, embedded by a
dilated temporal conv net (optionally momentum-contrast pretrained), matched
window by window against attention-pooled support prototypes, and scored with
a CTC + MSE objective that tolerates any ordering of the atomic actions.
"""
from .config import RunConfig, load_config, parse_config
from .contrastive import AugmentationPolicy, MoCoState, augment, info_nce, momentum_update, pretrain_step
from .ctc import (InfeasibleTargetError, LossConfig, beam_search_decode, classify_by_likelihood, combined_loss,
                  ctc_loss, mse_loss)
from .data import (Dataset, Episode, GeneratorConfig, SplitManifest, generate_dataset, make_split,
                   nearest_prototype_accuracy, read_dataset, regenerate, sample_episode, write_dataset)
from .encoder import (ConfigError, EncoderParams, FrameFeatureSequence, InputError, WindowSpec, embed_video,
                      encode_window, init_encoder, segment)
from .model import FewShotModel, episode_loss, forward_episode, predict_episode
from .relation import EpisodeError, attention_pool, init_pooling, init_relation, mutual_refine, relation_scores
from .tensor import Tensor, backward, grad_check, no_grad
from .train import (build_model, prepare_data, run_ablation, run_eval, run_gradcheck, run_meta_train,
                    run_pipeline, run_pretrain)

__version__ = "0.1.0"
