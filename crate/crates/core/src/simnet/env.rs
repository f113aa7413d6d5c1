use std::collections::VecDeque;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::child_seed;
use crate::app::{ChoiceUnavailable, Environment, ProcessId};
use crate::crypto::{CryptoBackend, VrfKeyPair, VrfTriple};

/// Per-process sources of non-determinism, each an independent child stream
/// of the run seed.
pub struct ProcessEnv {
    app_rng: ChaCha8Rng,
    pinned: VecDeque<u8>,
    pub(crate) byz_rng: ChaCha8Rng,
    pub(crate) vrf: Option<VrfKeyPair>,
}

impl ProcessEnv {
    pub fn new(seed: u64, p: ProcessId, pinned: Vec<u8>, vrf: VrfKeyPair) -> Self {
        Self {
            app_rng: ChaCha8Rng::from_seed(child_seed(seed, Some(p), "app")),
            pinned: pinned.into(),
            byz_rng: ChaCha8Rng::from_seed(child_seed(seed, Some(p), "byzantine")),
            vrf: Some(vrf),
        }
    }

    fn draw(&mut self, len: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            match self.pinned.pop_front() {
                Some(b) => out.push(b),
                None => {
                    let mut rest = vec![0u8; len - out.len()];
                    self.app_rng.fill_bytes(&mut rest);
                    out.extend(rest);
                }
            }
        }
        out
    }
}

/// The environment an application sees while executing on a live process.
pub struct LiveEnv<'a> {
    now: u64,
    env: &'a mut ProcessEnv,
    crypto: &'a mut dyn CryptoBackend,
    vrf_tag: Option<Vec<u8>>,
}

impl<'a> LiveEnv<'a> {
    pub(crate) fn new(
        now: u64,
        env: &'a mut ProcessEnv,
        crypto: &'a mut dyn CryptoBackend,
        vrf_tag: Option<Vec<u8>>,
    ) -> Self {
        Self {
            now,
            env,
            crypto,
            vrf_tag,
        }
    }
}

impl Environment for LiveEnv<'_> {
    fn random_bytes(&mut self, len: usize) -> Result<Vec<u8>, ChoiceUnavailable> {
        Ok(self.env.draw(len))
    }

    fn clock(&mut self) -> Result<u64, ChoiceUnavailable> {
        Ok(self.now)
    }

    fn verifiable_random(&mut self) -> Result<VrfTriple, ChoiceUnavailable> {
        let (Some(tag), Some(kp)) = (self.vrf_tag.as_ref(), self.env.vrf.as_ref()) else {
            return Err(ChoiceUnavailable);
        };
        self.crypto.vrf_eval(kp, tag).map_err(|_| ChoiceUnavailable)
    }
}
