"""Attention-weighted generalized-mean descriptors for image retrieval.

A numpy/scipy engine covering the full pipeline: a small reverse-mode
autodiff tape, differentiable pooling (generalized mean, average, max), a
residual attention branch over backbone tap points, contrastive fine-tuning
with hard-negative mining, discriminative whitening, multi-scale
aggregation, exact dot-product search with query expansion, database
augmentation and graph diffusion, and Medium/Hard mAP evaluation.
"""

from .tensor import (Tensor, ShapeError, NumericalError, backward, grad_check,
                     set_default_dtype, default_dtype)
from .storage import (DescriptorSet, FormatError, read_tensor, write_tensor,
                      read_json, write_json, save_descriptor_set,
                      load_descriptor_set)
from .pooling import PoolingSpec, gem_pool, spoc_pool, mac_pool, pool
from .attention import (AttentionConfig, AttentionNet, StageMaps, ToyBackbone,
                        ToyBackboneConfig, attention_compose,
                        descriptor_from_maps, save_attention_net,
                        load_attention_net)
from .training import (TrainConfig, TrainingTuple, Adam, contrastive_loss,
                       lr_at_epoch, mine_hard_negatives, build_tuples,
                       train_epoch, train_toy, toy_config, ToyModel,
                       make_synthetic_dataset, save_checkpoint,
                       load_checkpoint)
from .postprocess import (WhiteningTransform, MultiScaleSpec, learn_whitening,
                          apply_whitening, multiscale_descriptor,
                          aggregate_descriptors, l2n)
from .retrieval import (Index, RankedList, DiffusionParams, RetrievalPipeline,
                        search, average_qe, alpha_qe, dba, build_knn_graph,
                        diffusion_seed, diffuse, rerank_with_diffusion,
                        run_pipeline, save_index, load_index)
from .evaluation import (GroundTruth, QueryLabels, ProtocolSpec, MEDIUM, HARD,
                         average_precision, evaluate, sweep_dba_qe,
                         sweep_alpha_beta, load_ground_truth,
                         save_ground_truth, protocol_by_name)

__version__ = "0.1.0"
