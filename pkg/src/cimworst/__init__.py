"""Worst-case weight perturbation analysis for compute-in-memory DNN accelerators."""
from .device import DeviceConfig, WeightPerturbation, compute_thg, sample_mc_perturbation
from .models import Network, QuantConfig, TrainConfig, build, train
from .search import SearchConfig, binary_search_c, mc_worstcase, optimize_perturbation, weight_pgd

__version__ = "0.1.0"
