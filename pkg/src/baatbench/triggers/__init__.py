from .adversarial import (ConvergenceWarning, NumericalError, PerturbationSpec, UAPResult, pgd_perturb,
                          universal_perturbation)
from .image import (PatchSpec, StyleSpec, TriggerError, apply_additive, apply_blend, apply_patch,
                    apply_stylization, apply_warp, build_warp_field, checker_patch,
                    derive_sample_specific_pattern, patch_box, patch_mask, quantize)
from .spec import (KINDS, TriggerSpec, additive_agnostic, additive_specific, apply_trigger, badnets,
                   frozen_specific, load_pattern, patch_spec, save_pattern, stylize, uap, warp)
