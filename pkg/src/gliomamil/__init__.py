"""Multi-task multi-instance learning of glioma markers, histology and diagnosis."""

from .autodiff import Tensor, backward, no_grad
from .backbone import BackboneConfig, ModelOutputs, PatchBag, forward, forward_batch, init_params, pad_bag
from .curriculum import CurriculumSchedule, dcc_loss, dcc_overlap, rank_weights, schedule_k
from .graph import CooccurrenceMatrix, GraphParams, estimate_cooccurrence, gcn_forward, lc_loss
from .who import GliomaClass, MarkerLabels, classify, consistency

__version__ = "0.1.0"
