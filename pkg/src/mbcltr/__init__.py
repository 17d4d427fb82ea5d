"""Mixture-based correction of position and trust bias in click logs.

Modules: :mod:`data` (datasets), :mod:`clicks` (click simulation and CTR
tables), :mod:`mixture` (two-component EM), :mod:`correction` (MBC, AC,
IPS), :mod:`rbem` (regression-based EM), :mod:`ltr` (linear rankers),
:mod:`evaluate` (NDCG, significance) and :mod:`experiment` (runner).
"""

from .clicks import BiasProfile, SessionLog, build_bias_profile, simulate_dcm, simulate_pbm, simulate_ubm
from .correction import RelevanceEstimates, ac_correct, ips_correct, mbc_correct, mbc_from_log, no_correction
from .data import Dataset, Query, parse_svmlight, synth_dataset
from .evaluate import EvalReport, ndcg_at_k
from .ltr import RankerModel, TrainConfig, train
from .mixture import MixtureFit, fit_em, posterior

__version__ = "0.1.0"

__all__ = [
    "BiasProfile", "SessionLog", "build_bias_profile", "simulate_pbm", "simulate_dcm", "simulate_ubm",
    "RelevanceEstimates", "ac_correct", "ips_correct", "mbc_correct", "mbc_from_log", "no_correction",
    "Dataset", "Query", "parse_svmlight", "synth_dataset",
    "EvalReport", "ndcg_at_k", "RankerModel", "TrainConfig", "train",
    "MixtureFit", "fit_em", "posterior",
]
