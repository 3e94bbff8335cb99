"""Speech-driven animatronic face pipeline.

Blendshape coefficients are turned into constrained motor commands through a
learned self-model of a (simulated) face, then packed into servo frames.
"""

from .blendshape_rig import BlendshapeRig, build_default_rig, rig_landmarks
from .dtw_align import AlignmentPath, FeatureSequence, dtw, warp_to_reference
from .emotion_decoder import (DisentangledSample, EmotionDecoder, SyntheticCorpus,
                              cross_reconstruction_loss, infer_blendshapes,
                              self_reconstruction_loss, synth_corpus, total_loss,
                              train_decoder)
from .face_oracle import FaceOracle, OracleConfig, build_oracle, simulate_landmarks
from .inverse_solver import (InverseRetargeter, SolveReport, SolverOptions,
                             blendshape_to_motor, retarget_frame, retarget_sequence)
from .metrics import Calibration, eve, lve, mean_landmark_distance
from .motor_protocol import (MotorSpec, MotorSpecTable, clamp_to_limits, decode_servo_frame,
                             default_table, denormalize, encode_servo_frame, load_spec_table,
                             normalize)
from .self_model import (Dataset, SelfModel, TrainConfig, generate_dataset,
                         l1_landmark_loss, loss_gradient_wrt_input, predict, train_self_model)

__version__ = "0.1.0"
