"""Desk-scale DVRF editing on closed-form Gaussian-mixture velocity fields."""
__version__ = "0.1.0"

from .schedules import Schedule, ShiftRule, T_MAX, T_MIN, eval_schedule, eval_shift, weight_dvrf
from .condfield import NULL, CondGMMField, Mixture, eps_view, mc_posterior, velocity_view
from .distill import DistillContext, grad_dds, grad_dvrf, grad_rfds, grad_sds, energy_dvrf
from .editor import EditConfig, EditRecord, edit_dvrf, flowedit_baseline, flowedit_matched_config
from .analytics import equivalence_report, eta_sweep, path_to_chord, update_energy
