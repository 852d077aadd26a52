"""In-hospital cardiac-arrest risk from single-channel 40 Hz PPG: a causal
patch-transformer feature extractor feeding sequence-to-one aggregators,
with an hourly alarm protocol, classical baselines, and latent-trajectory
export."""

__version__ = "0.1.0"
