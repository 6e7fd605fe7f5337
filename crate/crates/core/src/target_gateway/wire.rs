//! Loopback block-I/O framing between simulated initiators and the gateway.
//!
//! Request:  `u32 BE body length | op u8 (0=read, 1=write) | u16 BE name length |
//!            name | u64 BE offset | u32 BE length (read) or u32 BE payload
//!            length + payload (write)`.
//! Response: `u32 BE body length | status u8 | payload`.
//! Error responses carry a UTF-8 message as payload.

use thiserror::Error;

pub const OP_READ: u8 = 0;
pub const OP_WRITE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    NotFound = 1,
    AccessDenied = 2,
    OutOfBounds = 3,
    ReadOnlyTarget = 4,
    TargetGone = 5,
    BadRequest = 6,
    Internal = 7,
}

impl Status {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => Self::Ok,
            1 => Self::NotFound,
            2 => Self::AccessDenied,
            3 => Self::OutOfBounds,
            4 => Self::ReadOnlyTarget,
            5 => Self::TargetGone,
            6 => Self::BadRequest,
            7 => Self::Internal,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Read { target: String, offset: u64, len: u32 },
    Write { target: String, offset: u64, data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: Status,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("frame length {declared} does not match body of {actual} bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown op {0}")]
    UnknownOp(u8),
    #[error("unknown status {0}")]
    UnknownStatus(u8),
    #[error("target name is not utf-8")]
    BadName,
    #[error("target name too long")]
    NameTooLong,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn frame(body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

fn unframe(bytes: &[u8]) -> Result<&[u8], WireError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let declared = c.u32()? as usize;
    let actual = bytes.len() - 4;
    if declared != actual {
        return Err(WireError::LengthMismatch { declared, actual });
    }
    Ok(&bytes[4..])
}

pub fn encode_request(req: &Request) -> Result<Vec<u8>, WireError> {
    let (op, target, offset) = match req {
        Request::Read { target, offset, .. } => (OP_READ, target, *offset),
        Request::Write { target, offset, .. } => (OP_WRITE, target, *offset),
    };
    let name = target.as_bytes();
    let name_len: u16 = name.len().try_into().map_err(|_| WireError::NameTooLong)?;
    let mut body = Vec::with_capacity(1 + 2 + name.len() + 8 + 4);
    body.push(op);
    body.extend_from_slice(&name_len.to_be_bytes());
    body.extend_from_slice(name);
    body.extend_from_slice(&offset.to_be_bytes());
    match req {
        Request::Read { len, .. } => body.extend_from_slice(&len.to_be_bytes()),
        Request::Write { data, .. } => {
            body.extend_from_slice(&(data.len() as u32).to_be_bytes());
            body.extend_from_slice(data);
        }
    }
    Ok(frame(body))
}

pub fn decode_request(bytes: &[u8]) -> Result<Request, WireError> {
    let body = unframe(bytes)?;
    let mut c = Cursor { buf: body, pos: 0 };
    let op = c.u8()?;
    let name_len = c.u16()? as usize;
    let target = std::str::from_utf8(c.take(name_len)?)
        .map_err(|_| WireError::BadName)?
        .to_string();
    let offset = c.u64()?;
    let req = match op {
        OP_READ => Request::Read {
            target,
            offset,
            len: c.u32()?,
        },
        OP_WRITE => {
            let n = c.u32()? as usize;
            Request::Write {
                target,
                offset,
                data: c.take(n)?.to_vec(),
            }
        }
        other => return Err(WireError::UnknownOp(other)),
    };
    if c.pos != body.len() {
        return Err(WireError::LengthMismatch {
            declared: body.len(),
            actual: c.pos,
        });
    }
    Ok(req)
}

pub fn encode_response(resp: &Response) -> Vec<u8> {
    let mut body = Vec::with_capacity(1 + resp.payload.len());
    body.push(resp.status as u8);
    body.extend_from_slice(&resp.payload);
    frame(body)
}

pub fn decode_response(bytes: &[u8]) -> Result<Response, WireError> {
    let body = unframe(bytes)?;
    let (&status, payload) = body.split_first().ok_or(WireError::Truncated)?;
    Ok(Response {
        status: Status::from_u8(status).ok_or(WireError::UnknownStatus(status))?,
        payload: payload.to_vec(),
    })
}
