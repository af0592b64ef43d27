"""AuxIVA source separation with classical or learned surrogate source models."""
from .glu import GluNet, glu_forward, init_glu, load_archive, load_params, save_archive, save_params
from .iva import AuxIvaConfig, auxiva_run, default_iters, ip2_update, iss_update_source, iss_vector, neg_log_likelihood
from .metrics import coherence_loss, minimal_distortion_scale, pit_wrap, si_sdr, si_sir
from .models import gauss_weights, laplace_weights, model_weights
from .stft import StftConfig, istft, stft

__version__ = "0.1.0"
