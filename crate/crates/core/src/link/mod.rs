//! Emulated radio links: one frame format carried over stream (wifi,
//! bluetooth) and datagram (zigbee) sockets.

pub mod frame;
mod transport;

pub use frame::{
    crc16_ccitt_false, decode_frame, encode_frame, FrameError, LinkFrame, StreamDecoder, StreamItem,
};
pub use transport::{
    listen, ByteCounter, InboundFrame, LinkConnection, LinkEndpoint, LinkError, LinkListener, LinkStats,
    TransportKind,
};
