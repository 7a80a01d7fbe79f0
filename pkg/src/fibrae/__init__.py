"""fibrae: fibered auto-encoders with geodesic transport between condition fibers.

The latent space splits into a base block (one embedding per condition) and a
fiber block (within-condition variation, confined to [-1, 1] by a sine
bottleneck). The decoder pulls a Riemannian metric back onto the latent
space, and points move between fibers along energy-minimizing paths expanded
over a hat-function basis.
"""

from .autodiff import (NumericalError, Tape, Tensor, finite_difference_gradient,
                       finite_difference_jacobian)
from .geometry import (ConditionReport, LatentPoint, MetricTensor, discrete_energy,
                       h1_inner_product, jacobian, metric_condition_report,
                       pullback_metric, segment_energies)
from .geodesic import (FaberSchauderBasis, GeodesicPath, SolverConfig, TransportResult,
                       basis_eval, constant_speed_residual, correspondence_map,
                       interpolate, naive_transport, path_eval, solve_geodesic)
from .metrics import LabeledCloud, WardDecomposition, lisi, metrics_report, ward_decomposition
from .nn import (DecoderAdapter, DenseLayer, FiberedAutoencoder, GradientReversal,
                 ModelConfig, classifier_logits, decode, discriminator_prob, embed,
                 encode, grl_apply, init_model)
from .oracle import (GridGeodesicResult, IdentityDecoder, LinearDecoder, SphereDecoder,
                     grid_geodesic_oracle, linear_transport_oracle, run_suite,
                     sphere_geodesic_oracle)
from .training import (AdamState, TrainConfig, adam_step, cond_adv_update,
                       cond_fitting_update, cross_entropy, gan_update, mse_loss,
                       reconstruction_update, train)
from .data_io import (Dataset, ModelSection, RunConfig, load_csv, load_idx, load_model,
                      load_run_config, make_synthetic, normalize_minmax, save_model)

__version__ = "0.1.0"
