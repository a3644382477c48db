use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::wire::{param_checksum, payload_to_u64, u64_to_payload, MsgType, WireMessage};
use super::Collective;
use crate::error::{Error, Result};

/// Startup and per-message timeout used by the CLI.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Where a worker sits in the job.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerIdentity {
    pub rank: usize,
    pub world_size: usize,
    /// `host:port` of rank 0.
    pub coordinator: String,
}

impl WorkerIdentity {
    pub fn validate(&self) -> Result<()> {
        if self.world_size == 0 || self.rank >= self.world_size {
            return Err(Error::Config(format!(
                "rank {} is outside a world of size {}",
                self.rank, self.world_size
            )));
        }
        if u32::try_from(self.world_size).is_err() {
            return Err(Error::Config("world_size does not fit in 32 bits".into()));
        }
        Ok(())
    }
}

/// Hub-and-spoke collective. Rank 0 holds one stream per worker (index
/// `rank - 1`); workers hold one stream to rank 0.
#[derive(Debug)]
pub struct Tcp {
    rank: usize,
    world_size: usize,
    streams: Vec<TcpStream>,
    closed: bool,
}

fn link_error(rank: usize, e: Error) -> Error {
    match e {
        Error::Socket(io) => Error::Distributed(format!("link to rank {rank} failed: {io}")),
        other => other,
    }
}

impl Tcp {
    /// Forms the job: rank 0 listens on the coordinator address and waits for
    /// a hello from every other rank; workers connect and say hello. Fails
    /// after `timeout`, naming missing ranks.
    pub fn connect(id: &WorkerIdentity, timeout: Duration) -> Result<Self> {
        id.validate()?;
        if id.world_size == 1 {
            return Ok(Self {
                rank: 0,
                world_size: 1,
                streams: Vec::new(),
                closed: false,
            });
        }
        let streams = if id.rank == 0 {
            Self::accept_workers(id, timeout)?
        } else {
            vec![Self::dial(id, timeout)?]
        };
        Ok(Self {
            rank: id.rank,
            world_size: id.world_size,
            streams,
            closed: false,
        })
    }

    fn accept_workers(id: &WorkerIdentity, timeout: Duration) -> Result<Vec<TcpStream>> {
        let listener = TcpListener::bind(&id.coordinator)
            .map_err(|e| Error::Distributed(format!("cannot listen on {}: {e}", id.coordinator)))?;
        listener.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        let mut slots: Vec<Option<TcpStream>> = (1..id.world_size).map(|_| None).collect();
        while slots.iter().any(Option::is_none) {
            match listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_nodelay(true)?;
                    s.set_read_timeout(Some(timeout))?;
                    let hello = WireMessage::read_from(&mut s)?;
                    let r = hello.rank as usize;
                    if hello.msg_type != MsgType::Hello || r == 0 || r >= id.world_size {
                        return Err(Error::Protocol(format!(
                            "expected hello from a worker rank, got {:?} from rank {r}",
                            hello.msg_type
                        )));
                    }
                    if slots[r - 1].is_some() {
                        return Err(Error::Protocol(format!("rank {r} connected twice")));
                    }
                    s.set_read_timeout(None)?;
                    slots[r - 1] = Some(s);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let missing: Vec<usize> = slots
                            .iter()
                            .enumerate()
                            .filter(|(_, s)| s.is_none())
                            .map(|(i, _)| i + 1)
                            .collect();
                        return Err(Error::Distributed(format!(
                            "startup timed out; missing ranks {missing:?}"
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(slots.into_iter().map(|s| s.expect("filled")).collect())
    }

    fn dial(id: &WorkerIdentity, timeout: Duration) -> Result<TcpStream> {
        let deadline = Instant::now() + timeout;
        loop {
            let attempt = id
                .coordinator
                .to_socket_addrs()
                .map_err(|e| Error::Config(format!("bad coordinator address {}: {e}", id.coordinator)))?
                .find_map(|a| TcpStream::connect_timeout(&a, Duration::from_millis(500)).ok());
            if let Some(mut s) = attempt {
                s.set_nodelay(true)?;
                WireMessage::new(MsgType::Hello, id.rank as u32, Vec::new()).write_to(&mut s)?;
                return Ok(s);
            }
            if Instant::now() >= deadline {
                return Err(Error::Distributed(format!(
                    "rank {} could not reach coordinator {}",
                    id.rank, id.coordinator
                )));
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    fn send(&mut self, peer: usize, msg: &WireMessage) -> Result<()> {
        let idx = if self.rank == 0 { peer - 1 } else { 0 };
        msg.write_to(&mut self.streams[idx])
            .map_err(|e| link_error(peer, e.into()))
    }

    /// Reads one message of type `want` and `len` values (if given) from `peer`.
    fn recv(&mut self, peer: usize, want: MsgType, len: Option<usize>) -> Result<WireMessage> {
        let idx = if self.rank == 0 { peer - 1 } else { 0 };
        let m = WireMessage::read_from(&mut self.streams[idx]).map_err(|e| link_error(peer, e))?;
        if m.msg_type != want {
            return Err(Error::Protocol(format!(
                "expected {want:?} from rank {peer}, got {:?}",
                m.msg_type
            )));
        }
        if m.rank as usize != peer {
            return Err(Error::Protocol(format!("message from rank {peer} claims rank {}", m.rank)));
        }
        if let Some(n) = len {
            if m.payload.len() != n {
                return Err(Error::Protocol(format!(
                    "rank {peer} sent {} values, expected {n}",
                    m.payload.len()
                )));
            }
        }
        Ok(m)
    }

    /// Fixed-order mean: rank 0's values, then ranks 1.. in order, summed in
    /// f64 and divided by the world size.
    fn reduce(&mut self, values: &mut [f32], up: MsgType, down: MsgType) -> Result<()> {
        if self.world_size == 1 {
            return Ok(());
        }
        let me = self.rank as u32;
        if self.rank == 0 {
            let mut acc: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
            for peer in 1..self.world_size {
                let m = self.recv(peer, up, Some(values.len()))?;
                for (a, v) in acc.iter_mut().zip(&m.payload) {
                    *a += f64::from(*v);
                }
            }
            let n = self.world_size as f64;
            for (dst, a) in values.iter_mut().zip(&acc) {
                *dst = (a / n) as f32;
            }
            let reply = WireMessage::new(down, me, values.to_vec());
            for peer in 1..self.world_size {
                self.send(peer, &reply)?;
            }
        } else {
            self.send(0, &WireMessage::new(up, me, values.to_vec()))?;
            let m = self.recv(0, down, Some(values.len()))?;
            values.copy_from_slice(&m.payload);
        }
        Ok(())
    }
}

impl Collective for Tcp {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world_size
    }

    fn allreduce_mean(&mut self, grads: &mut [f32]) -> Result<()> {
        self.reduce(grads, MsgType::Grads, MsgType::AvgGrads)
    }

    fn average(&mut self, values: &mut [f32]) -> Result<()> {
        self.reduce(values, MsgType::Stats, MsgType::Stats)
    }

    fn broadcast(&mut self, params: &mut [f32]) -> Result<()> {
        if self.world_size == 1 {
            return Ok(());
        }
        if self.rank == 0 {
            let m = WireMessage::new(MsgType::Params, 0, params.to_vec());
            for peer in 1..self.world_size {
                self.send(peer, &m)?;
            }
        } else {
            let m = self.recv(0, MsgType::Params, Some(params.len()))?;
            params.copy_from_slice(&m.payload);
        }
        Ok(())
    }

    fn verify(&mut self, params: &[f32]) -> Result<()> {
        if self.world_size == 1 {
            return Ok(());
        }
        let mine = param_checksum(params);
        if self.rank == 0 {
            let mut bad = Vec::new();
            for peer in 1..self.world_size {
                let m = self.recv(peer, MsgType::Checksum, Some(2))?;
                if payload_to_u64(&m.payload)? != mine {
                    bad.push(peer);
                }
            }
            let verdict = WireMessage::new(MsgType::Checksum, 0, vec![if bad.is_empty() { 1.0 } else { 0.0 }]);
            for peer in 1..self.world_size {
                self.send(peer, &verdict)?;
            }
            if !bad.is_empty() {
                return Err(Error::Distributed(format!("parameter checksum mismatch on ranks {bad:?}")));
            }
        } else {
            self.send(0, &WireMessage::new(MsgType::Checksum, self.rank as u32, u64_to_payload(mine)))?;
            let v = self.recv(0, MsgType::Checksum, Some(1))?;
            if v.payload[0] != 1.0 {
                return Err(Error::Distributed("parameter checksum mismatch across ranks".into()));
            }
        }
        Ok(())
    }

    fn shutdown(&mut self) -> Result<()> {
        if self.closed || self.world_size == 1 {
            self.closed = true;
            return Ok(());
        }
        self.closed = true;
        if self.rank == 0 {
            let m = WireMessage::new(MsgType::Shutdown, 0, Vec::new());
            for peer in 1..self.world_size {
                self.send(peer, &m)?;
            }
        } else {
            self.recv(0, MsgType::Shutdown, Some(0))?;
        }
        Ok(())
    }
}
