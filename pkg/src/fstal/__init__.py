"""Few-shot temporal action localization over snippet-embedding matrices.

The pieces, bottom to top:

* :mod:`fstal.autodiff` -- tape-based reverse-mode differentiation over
  dense float64 matrices, with a finite-difference checker;
* :mod:`fstal.model` -- the cosine snippet classifier, its support-set
  adaptation, the query-adaptive transformer, meta-training steps, and
  checkpoints;
* :mod:`fstal.data` -- annotated videos, label rasterization, episodic
  sampling, the synthetic world, and the on-disk formats;
* :mod:`fstal.localization` -- probability-to-segment decoding, soft
  suppression, tIoU / average precision / mAP reports;
* :mod:`fstal.harness` -- run configuration, meta-training and evaluation
  pipelines, ablations; :mod:`fstal.cli` exposes them as subcommands.
"""

from .autodiff import GradCheckReport, Tape, as_matrix, grad_check
from .data import (AnnotatedVideo, Episode, Segment, SyntheticConfig,
                   SyntheticWorld, load_annotations, load_feature_file,
                   rasterize_labels, sample_episode, write_feature_file)
from .localization import (Candidate, EvalConfig, average_precision,
                           decode_segments, localize, map_report, soft_nms,
                           tiou)
from .model import (AdaptConfig, ClassifierWeights, TransformerParams,
                    adapt_classifier, adapt_to_query, balanced_cross_entropy,
                    classify_snippets, init_from_support, load_checkpoint,
                    meta_step, save_checkpoint)
from .harness import (PROFILES, RunConfig, build_pools, cmd_cross_eval,
                      cmd_evaluate, cmd_gen_synthetic, cmd_gradcheck,
                      cmd_meta_train, evaluate_pool, meta_train,
                      qva_ablation, resolve_config)

__version__ = "0.1.0"
