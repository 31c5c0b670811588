//! GRU, DeltaGRU and TCN building blocks, streaming inference and BPTT.

mod bptt;
mod checkpoint;
mod delta;
mod dense;
mod params;
mod real;
mod stream;
mod tape;

pub use bptt::{
    cascade_batch_grad, cascade_frame_grad, cascade_loss, features_from_iq, features_from_iq_backward,
    frame_features, frame_halo, reduce_frames, supervised_batch_grad, supervised_frame_grad, supervised_loss,
    BatchGrad, FrameGrad, FrameRef,
};
pub use checkpoint::{
    load_model, model_from_json, model_to_json, save_model, ModelFile, TensorRecord, MODEL_FORMAT,
    MODEL_FORMAT_VERSION,
};
pub use delta::{delta_encode, delta_gru_step, DeltaState, OpTally, OpTrace, SparsityReport, StepStats};
pub use dense::{
    fc_forward, gru_forward_dense, gru_forward_dense_flat, gru_step_dense, iq_rows, tcn_forward, tcn_forward_iq,
    tcn_point,
};
pub use params::{
    count_active_params, count_params, DeltaThresholds, FcParams, GruParams, ModelDims, ParamCount, TResDeltaGru,
    TcnParams, IQ, TCN_HIDDEN, TCN_KERNEL,
};
pub use real::{hardswish, hardswish_grad, sigmoid, Real};
pub use stream::{model_forward, model_forward_traced, ModelStream};
pub use tape::{
    gru_fc_backward, gru_fc_forward, model_backward, model_forward_tape, tcn_backward, tcn_forward_tape, ActGrads,
    ActQuant, GruTape, ModelTape, TcnTape,
};
