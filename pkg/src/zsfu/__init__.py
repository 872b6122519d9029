"""Zero-shot federated class unlearning with synthetic proxies, gradient surgery and repair."""

from .data import ClientPartition, DeletionRequest, ImageSet, load_dataset, partition_iid
from .fedsim import FedConfig, fedavg, run_federation
from .models import build_model
from .noise import NoiseBundle, NoiseConfig, forge_forget_proxies, forge_retain_proxies
from .disentangle import disentangle_loss, run_disentangle
from .unlearn import UnlearnHyper, gradient_mask, harmonize, run_unlearn
from .repair import RepairPolicy, run_repair
from .metrics import AuditReport, audit

__version__ = "0.1.0"

__all__ = [
    "AuditReport", "ClientPartition", "DeletionRequest", "FedConfig", "ImageSet", "NoiseBundle",
    "NoiseConfig", "RepairPolicy", "UnlearnHyper", "audit", "build_model", "disentangle_loss",
    "fedavg", "forge_forget_proxies", "forge_retain_proxies", "gradient_mask", "harmonize",
    "load_dataset", "partition_iid", "run_disentangle", "run_federation", "run_repair", "run_unlearn",
]
