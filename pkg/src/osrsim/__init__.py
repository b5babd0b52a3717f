"""Open set recognition with difficulty-aware fake simulation.

A grouped CNN classifier is trained jointly with two fake generators: a
Copycat network that imitates the classifier's intermediate features to
produce hard (and easy) fake features, and a small GAN whose images act as
moderatefakes. The smoothed training target for hard fakes doubles as the
confidence threshold for rejecting unknowns at test time.
"""

__version__ = "0.1.0"

from .data import (
    DataPart,
    Dataset,
    DataSplit,
    SplitSpec,
    build_split,
    load_idx,
    make_mnist_noise,
    make_noise_dataset,
    registry_lookup,
    write_idx,
)
from .evaluation import (
    DifficultyReport,
    MetricsRecord,
    auroc,
    kl_to_uniform,
    macro_f1,
    openness,
    sliced_wasserstein,
    wasserstein_difficulty,
)
from .inference import OpenSetPredictions, inherent_threshold, predict, score
from .losses import (
    LossWeights,
    classifier_loss,
    copycat_loss,
    cross_entropy,
    discriminator_loss,
    generator_loss,
    imitation_loss,
    onehot,
    open_loss_copycat,
    open_loss_gan,
    smooth_label,
    uniform_target,
)
from .models import (
    FAKE,
    REAL,
    Discriminator,
    DualBatchNorm2d,
    Generator,
    GroupedNet,
    GroupIndexSets,
    ModelConfig,
    build_classifier,
    build_gan,
)
from .training import (
    TrainingConfig,
    TrainingDiverged,
    TrainState,
    init_state,
    load_checkpoint,
    phase_one_step,
    phase_two_step,
    save_checkpoint,
    train,
)
