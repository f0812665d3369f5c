"""bridgekit: discrete Markov-bridge sequence refinement at desk scale.

Learns the probabilistic dependency between a deterministic prior sequence
(produced by a condition encoder) and a target sequence through a pinned
categorical Markov chain, with exact closed-form kernels, two training
objectives, a conditioned approximator, and brute-force verification
oracles for every closed-form claim.
"""

from .bridge import (BridgeSchedule, BridgeState, TokenSequence,
                     cumulative_kernel_check, make_cosine_schedule,
                     marginal_distribution, reference_rollout, reference_step,
                     sample_marginal, transition_distribution)
from .losses import (LambdaMode, LossConfig, Objective, categorical_kl,
                     joint_kl_identity_check, simplified_ce_loss, vlb_step_loss)
from .models import (ConditioningBundle, ModelArch, NeuralModel, ProbTable,
                     TabularModel, build_conditioning, grad,
                     tabular_fit_closed_form)
from .prior import (EncoderParams, PairedExample, SyntheticTaskSpec, TaskKind,
                    encode_prior, fit_encoder, generate_splits,
                    generate_synthetic, local_context_prior_ceiling)
from .sampling import SampleMode, sample, sample_many
from .training import (InferenceBundle, TrainConfig, TrainState, fit,
                       load_inference_bundle, noam_lr, train_step)
from .metrics import MetricsReport, evaluate, perplexity, recovery_rate
from .oracle import (enumerate_trajectories, exact_nll, exact_vlb,
                     verify_proposition1)

__version__ = "0.1.0"
