pub mod checkpoint;
pub mod decode;
pub mod loss;
pub mod model;

pub use checkpoint::Checkpoint;
pub use decode::{beam_decode, greedy_decode, Hypothesis, MAX_SYMBOLS_PER_FRAME};
pub use loss::{transducer_forward_backward, transducer_loss};
pub use model::{
    encoder_graph, init_core, is_core_param, joint_graph, joint_loss_graph, loss_graph,
    prediction_graph, CoreModel, EncoderOutput, JointConfig, PredState, BLANK,
};
