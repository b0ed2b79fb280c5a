"""Universal adversarial perturbations against a tiny object detector.

Pipeline: synthetic scene generation -> detector training -> per-class
curation -> universal perturbation synthesis -> blind-degree metrics and
resilience ranking.  See the CLI (`uapdet --help`) or `experiment.run_experiment`
for the end-to-end path.
"""

from .attack import (AttackConfig, Perturbation, compute_norm, objective,
                     per_image_descend, project_linf, regularizer,
                     synthesize_universal)
from .curation import CuratedDataset, curate
from .detector import (DetectorArch, DetectorWeights, TrainConfig, detect,
                       forward, input_gradient, load_weights, save_weights, train)
from .errors import DataError, NumericalError, UapdetError, UsageError
from .experiment import ExperimentConfig, load_config, run_experiment
from .ingest import count_category_images, evaluate_external, load_annotations
from .metrics import (BlindDegreeCurve, BlindDegreeReport, ResilienceRanking,
                      image_blind_degree, indicator, instance_blind_degree,
                      rank_resilience, resilience_table)
from .scenes import (DEFAULT_CLASSES, ClassId, Dataset, GroundTruthObject,
                     SceneSpec, generate_dataset, render_scene)

__version__ = "0.1.0"
