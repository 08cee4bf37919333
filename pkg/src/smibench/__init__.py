"""smibench: uniform benchmarking of transformer families on SMILES
multi-task regression pre-training and frozen-backbone fine-tuning."""

from .families import ModelFamily
from .tokenizer import (EncodedBatch, EncodedSequence, TokenizationError,
                        Vocabulary, build_vocab, decode, encode, encode_batch,
                        tokenize)
from .curation import (CurationReport, DescriptorTable, MoleculeRecord,
                       SplitPlan, builtin_descriptors, curate, dedup,
                       epoch_permutation, mask_outliers, prune_constant_columns,
                       split, zscore)
from .models import (FtModel, ModelConfig, MtrModel, backbone_checksum, build,
                     forward_ft, forward_mtr, freeze_backbone, load_checkpoint,
                     param_count, save_checkpoint)
from .training import (AdamW, AdamWConfig, EpochCheckpoint, FtEpochRecord,
                       LrSchedule, TaskSplits, TrainConfig, lr_at, train_ft,
                       train_mtr)
from .metrics import (BestMetricsSet, GroupReport, MetricRecord, RunKey,
                      auc_roc, benchmark, build_group_report, deviations,
                      group_average, mae, rmse, select_best)
from .gridrun import DataSlice, GridSpec, SizeSpec, run_grid
from .reporting import render_reports

__version__ = "0.1.0"
