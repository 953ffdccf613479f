//! Model zoo: LSTM, ltLSTM, cltLSTM and the two-head cltLSTM.

mod config;
mod net;
mod two_head;

pub use config::{
    head_param_count, lookahead_frames, param_count, production_config, production_param_table,
    time_stack_param_count, ModelConfig, ParamCountRow, Variant,
};
pub use net::{
    forward_cltlstm, forward_ltlstm, forward_time_lstm, lookahead_embedding, DepthHead, Head,
    HeadStream, LayerTrajectoryModel, ModelStream, OutputLayer, TimeLstmStack, TimeStream, rescale_init,
};
pub use two_head::{
    build_second_head, checksum, forward_two_head, stack_checksum, TwoHeadModel, TwoHeadOutput,
};
