"""Spectral machine learning for classifying stacks of 2-D images."""
from .classifier import EnsembleConfig, TrainedModel, fit, predict, predict_proba, roc_curve
from .dataset import Cohort, ImageStack, Patient, SynthParams, read_manifest, read_stack, synth_cohort, write_stack
from .pipeline import RunConfig, cross_validate, load_model, save_model, test_pipeline, train_pipeline
from .screening import estimate_mask
from .selection import select_alphas
from .spectral import spike_basis

__version__ = "0.1.0"
