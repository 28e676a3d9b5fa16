//! MQTT 3.1.1 control packets used by the mini broker.

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("malformed remaining length")]
    RemainingLength,
    #[error("packet type {0} not supported")]
    UnsupportedType(u8),
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub protocol_level: u8,
    pub client_id: String,
    pub clean_session: bool,
    pub keep_alive: u16,
    pub username: Option<String>,
    pub password: Option<Bytes>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: u8,
    pub retain: bool,
    pub topic: String,
    /// Zero for qos 0.
    pub pkid: u16,
    pub payload: Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    ConnAck { session_present: bool, code: u8 },
    Publish(Publish),
    PubAck(u16),
    PubRec(u16),
    PubRel(u16),
    PubComp(u16),
    Subscribe { pkid: u16, filters: Vec<(String, u8)> },
    SubAck { pkid: u16, codes: Vec<u8> },
    Unsubscribe { pkid: u16, filters: Vec<String> },
    UnsubAck(u16),
    PingReq,
    PingResp,
    Disconnect,
}

fn read_u16(b: &mut Bytes) -> Result<u16, CodecError> {
    if b.remaining() < 2 {
        return Err(CodecError::Malformed("truncated u16"));
    }
    Ok(b.get_u16())
}

fn read_bin(b: &mut Bytes) -> Result<Bytes, CodecError> {
    let len = read_u16(b)? as usize;
    if b.remaining() < len {
        return Err(CodecError::Malformed("truncated string"));
    }
    Ok(b.split_to(len))
}

fn read_str(b: &mut Bytes) -> Result<String, CodecError> {
    String::from_utf8(read_bin(b)?.to_vec()).map_err(|_| CodecError::Malformed("invalid utf-8"))
}

fn put_bin(out: &mut BytesMut, s: &[u8]) {
    out.put_u16(s.len() as u16);
    out.put_slice(s);
}

/// Decodes one packet if `buf` holds a complete one, consuming it.
pub fn decode(buf: &mut BytesMut) -> Result<Option<Packet>, CodecError> {
    if buf.len() < 2 {
        return Ok(None);
    }
    let mut len = 0usize;
    let mut shift = 0;
    let mut pos = 1;
    loop {
        let Some(&byte) = buf.get(pos) else { return Ok(None) };
        len |= ((byte & 0x7F) as usize) << shift;
        pos += 1;
        if byte & 0x80 == 0 {
            break;
        }
        shift += 7;
        if shift > 21 {
            return Err(CodecError::RemainingLength);
        }
    }
    if buf.len() < pos + len {
        return Ok(None);
    }
    let first = buf[0];
    let mut frame = buf.split_to(pos + len).freeze();
    frame.advance(pos);
    parse(first, frame).map(Some)
}

fn parse(first: u8, mut b: Bytes) -> Result<Packet, CodecError> {
    let flags = first & 0x0F;
    Ok(match first >> 4 {
        1 => {
            let name = read_str(&mut b)?;
            if name != "MQTT" && name != "MQIsdp" {
                return Err(CodecError::Malformed("protocol name"));
            }
            if b.remaining() < 4 {
                return Err(CodecError::Malformed("connect header"));
            }
            let protocol_level = b.get_u8();
            let cflags = b.get_u8();
            let keep_alive = b.get_u16();
            let client_id = read_str(&mut b)?;
            if cflags & 0x04 != 0 {
                read_str(&mut b)?;
                read_bin(&mut b)?;
            }
            let username = if cflags & 0x80 != 0 { Some(read_str(&mut b)?) } else { None };
            let password = if cflags & 0x40 != 0 { Some(read_bin(&mut b)?) } else { None };
            Packet::Connect(Connect {
                protocol_level,
                client_id,
                clean_session: cflags & 0x02 != 0,
                keep_alive,
                username,
                password,
            })
        }
        2 => {
            if b.remaining() < 2 {
                return Err(CodecError::Malformed("connack"));
            }
            Packet::ConnAck {
                session_present: b.get_u8() & 1 == 1,
                code: b.get_u8(),
            }
        }
        3 => {
            let qos = (flags >> 1) & 0x03;
            if qos == 3 {
                return Err(CodecError::Malformed("qos 3"));
            }
            let topic = read_str(&mut b)?;
            let pkid = if qos > 0 { read_u16(&mut b)? } else { 0 };
            Packet::Publish(Publish {
                dup: flags & 0x08 != 0,
                qos,
                retain: flags & 0x01 != 0,
                topic,
                pkid,
                payload: b,
            })
        }
        4 => Packet::PubAck(read_u16(&mut b)?),
        5 => Packet::PubRec(read_u16(&mut b)?),
        6 => Packet::PubRel(read_u16(&mut b)?),
        7 => Packet::PubComp(read_u16(&mut b)?),
        8 => {
            let pkid = read_u16(&mut b)?;
            let mut filters = Vec::new();
            while b.has_remaining() {
                let f = read_str(&mut b)?;
                if !b.has_remaining() {
                    return Err(CodecError::Malformed("subscribe qos"));
                }
                filters.push((f, b.get_u8() & 0x03));
            }
            if filters.is_empty() {
                return Err(CodecError::Malformed("empty subscribe"));
            }
            Packet::Subscribe { pkid, filters }
        }
        9 => {
            let pkid = read_u16(&mut b)?;
            Packet::SubAck { pkid, codes: b.to_vec() }
        }
        10 => {
            let pkid = read_u16(&mut b)?;
            let mut filters = Vec::new();
            while b.has_remaining() {
                filters.push(read_str(&mut b)?);
            }
            Packet::Unsubscribe { pkid, filters }
        }
        11 => Packet::UnsubAck(read_u16(&mut b)?),
        12 => Packet::PingReq,
        13 => Packet::PingResp,
        14 => Packet::Disconnect,
        t => return Err(CodecError::UnsupportedType(t)),
    })
}

fn put_remaining_length(out: &mut BytesMut, mut len: usize) {
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        out.put_u8(byte);
        if len == 0 {
            break;
        }
    }
}

pub fn encode(packet: &Packet, out: &mut BytesMut) {
    let mut body = BytesMut::new();
    let first: u8 = match packet {
        Packet::Connect(c) => {
            put_bin(&mut body, b"MQTT");
            body.put_u8(c.protocol_level);
            let mut flags = 0u8;
            if c.clean_session {
                flags |= 0x02;
            }
            if c.username.is_some() {
                flags |= 0x80;
            }
            if c.password.is_some() {
                flags |= 0x40;
            }
            body.put_u8(flags);
            body.put_u16(c.keep_alive);
            put_bin(&mut body, c.client_id.as_bytes());
            if let Some(u) = &c.username {
                put_bin(&mut body, u.as_bytes());
            }
            if let Some(p) = &c.password {
                put_bin(&mut body, p);
            }
            0x10
        }
        Packet::ConnAck { session_present, code } => {
            body.put_u8(*session_present as u8);
            body.put_u8(*code);
            0x20
        }
        Packet::Publish(p) => {
            put_bin(&mut body, p.topic.as_bytes());
            if p.qos > 0 {
                body.put_u16(p.pkid);
            }
            body.put_slice(&p.payload);
            0x30 | ((p.dup as u8) << 3) | (p.qos << 1) | p.retain as u8
        }
        Packet::PubAck(id) => {
            body.put_u16(*id);
            0x40
        }
        Packet::PubRec(id) => {
            body.put_u16(*id);
            0x50
        }
        Packet::PubRel(id) => {
            body.put_u16(*id);
            0x62
        }
        Packet::PubComp(id) => {
            body.put_u16(*id);
            0x70
        }
        Packet::Subscribe { pkid, filters } => {
            body.put_u16(*pkid);
            for (f, q) in filters {
                put_bin(&mut body, f.as_bytes());
                body.put_u8(*q);
            }
            0x82
        }
        Packet::SubAck { pkid, codes } => {
            body.put_u16(*pkid);
            body.put_slice(codes);
            0x90
        }
        Packet::Unsubscribe { pkid, filters } => {
            body.put_u16(*pkid);
            for f in filters {
                put_bin(&mut body, f.as_bytes());
            }
            0xA2
        }
        Packet::UnsubAck(id) => {
            body.put_u16(*id);
            0xB0
        }
        Packet::PingReq => 0xC0,
        Packet::PingResp => 0xD0,
        Packet::Disconnect => 0xE0,
    };
    out.put_u8(first);
    put_remaining_length(out, body.len());
    out.put_slice(&body);
}

pub fn to_bytes(packet: &Packet) -> Bytes {
    let mut out = BytesMut::new();
    encode(packet, &mut out);
    out.freeze()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn connack_bytes() {
        let b = to_bytes(&Packet::ConnAck { session_present: true, code: 0 });
        assert_eq!(&b[..], &[0x20, 0x02, 0x01, 0x00]);
        assert_eq!(&to_bytes(&Packet::PingResp)[..], &[0xD0, 0x00]);
    }

    #[test]
    fn remaining_length_boundaries() {
        for (len, bytes) in [(0usize, 1usize), (127, 1), (128, 2), (16_383, 2), (16_384, 3), (2_097_152, 4)] {
            let mut out = BytesMut::new();
            put_remaining_length(&mut out, len);
            assert_eq!(out.len(), bytes, "len {len}");
        }
    }

    #[test]
    fn partial_frames_wait() {
        let full = to_bytes(&Packet::Publish(Publish {
            dup: false,
            qos: 1,
            retain: false,
            topic: "bench/0".into(),
            pkid: 7,
            payload: Bytes::from(vec![0xAB; 300]),
        }));
        for cut in 0..full.len() {
            let mut buf = BytesMut::from(&full[..cut]);
            assert_eq!(decode(&mut buf), Ok(None));
            assert_eq!(buf.len(), cut);
        }
        let mut buf = BytesMut::from(&full[..]);
        assert!(matches!(decode(&mut buf), Ok(Some(Packet::Publish(p))) if p.pkid == 7 && p.payload.len() == 300));
        assert!(buf.is_empty());
    }

    #[test]
    fn rejects_unknown_type() {
        let mut buf = BytesMut::from(&[0xF0u8, 0x00][..]);
        assert_eq!(decode(&mut buf), Err(CodecError::UnsupportedType(15)));
    }

    fn arb_packet() -> impl Strategy<Value = Packet> {
        let s = "[a-z/#+]{1,12}";
        prop_oneof![
            (s, any::<bool>(), any::<u16>()).prop_map(|(id, clean, ka)| Packet::Connect(Connect {
                protocol_level: 4,
                client_id: id,
                clean_session: clean,
                keep_alive: ka,
                username: None,
                password: None,
            })),
            (any::<bool>(), 0u8..6).prop_map(|(sp, code)| Packet::ConnAck { session_present: sp, code }),
            (s, 0u8..3, 1u16.., proptest::collection::vec(any::<u8>(), 0..2000), any::<bool>()).prop_map(
                |(topic, qos, pkid, payload, dup)| Packet::Publish(Publish {
                    dup,
                    qos,
                    retain: false,
                    topic,
                    pkid: if qos == 0 { 0 } else { pkid },
                    payload: payload.into(),
                })
            ),
            any::<u16>().prop_map(Packet::PubAck),
            any::<u16>().prop_map(Packet::PubRel),
            (any::<u16>(), proptest::collection::vec((s, 0u8..3), 1..4))
                .prop_map(|(pkid, filters)| Packet::Subscribe { pkid, filters }),
            (any::<u16>(), proptest::collection::vec(0u8..3, 1..4)).prop_map(|(pkid, codes)| Packet::SubAck { pkid, codes }),
            Just(Packet::PingReq),
            Just(Packet::Disconnect),
        ]
    }

    proptest! {
        #[test]
        fn roundtrip(packets in proptest::collection::vec(arb_packet(), 1..8)) {
            let mut buf = BytesMut::new();
            for p in &packets {
                encode(p, &mut buf);
            }
            for p in &packets {
                let got = decode(&mut buf).unwrap();
                prop_assert_eq!(got.as_ref(), Some(p));
            }
            prop_assert!(buf.is_empty());
        }
    }
}
