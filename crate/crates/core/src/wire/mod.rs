//! Framed binary protocol between the two nodes, its transports, and exact
//! traffic accounting.

mod capture;
mod frame;
mod ledger;
mod tensor;
mod transport;

pub use capture::{read_capture, verify_frames, write_capture, CaptureReport, CAPTURE_MAGIC};
pub use frame::{
    decode_frame, encode_frame, encode_frame_into, read_frame, write_frame, Direction, Frame, MessageType, ModuleTag,
    HEADER_LEN, MAGIC, MAX_PAYLOAD, NO_LAYER, VERSION,
};
pub use ledger::{expected_traffic, ledger_check, ExpectedTraffic, LedgerCheck, Phase, TrafficLedger, TrafficParams};
pub use tensor::{
    decode_tensors, descriptor_len, encode_matrix, encode_tensor, f16_to_f32, f32_to_f16_rne, scan_tensors, Tensor,
    TensorInfo, WireDType,
};
pub use transport::{loopback_pair, FaultyTransport, LoopbackTransport, Tap, TapLog, TapRecord, TcpTransport, Transport};
