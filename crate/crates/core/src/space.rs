//! Factored configuration space `(x₁s₁, …, x_N s_N)` and its composite-index
//! codec.
//!
//! Particle 1 is the slowest index and, within a particle, the internal
//! (spin) index runs fastest, so the per-particle index is
//! `external * internal_dims + internal`. This matches the Kronecker
//! convention of [`crate::linalg::tensor_product`].
//!
//! Besides the composite index `n`, the engine needs the split `n = (x, s)`
//! where `x` enumerates the joint external configuration of all particles and
//! `s` the joint spin configuration, both again with particle 1 slowest.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticleDims {
    pub external: usize,
    pub internal: usize,
}

impl ParticleDims {
    pub fn new(external: usize, internal: usize) -> Self {
        Self { external, internal }
    }

    pub fn dim(&self) -> usize {
        self.external * self.internal
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpaceError {
    #[error("configuration space needs at least one particle")]
    NoParticles,
    #[error("particle {particle} has a zero dimension")]
    ZeroDimension { particle: usize },
    #[error("index {index} out of range for dimension {dim}")]
    OutOfRange { index: usize, dim: usize },
    #[error("expected {expected} per-particle entries, got {got}")]
    ArityMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigurationSpace {
    particles: Vec<ParticleDims>,
    total_dim: usize,
    external_dim: usize,
    internal_dim: usize,
    external_of: Vec<u32>,
    internal_of: Vec<u32>,
    joined: Vec<u32>,
}

fn mixed_radix_decode(mut index: usize, radices: &[usize]) -> Vec<usize> {
    let mut digits = vec![0; radices.len()];
    for (digit, &radix) in digits.iter_mut().zip(radices).rev() {
        *digit = index % radix;
        index /= radix;
    }
    digits
}

fn mixed_radix_encode(digits: &[usize], radices: &[usize]) -> usize {
    digits
        .iter()
        .zip(radices)
        .fold(0, |acc, (&d, &r)| acc * r + d)
}

impl ConfigurationSpace {
    pub fn new(particles: Vec<ParticleDims>) -> Result<Self, SpaceError> {
        if particles.is_empty() {
            return Err(SpaceError::NoParticles);
        }
        if let Some(particle) = particles.iter().position(|p| p.dim() == 0) {
            return Err(SpaceError::ZeroDimension { particle });
        }
        let total_dim = particles.iter().map(ParticleDims::dim).product();
        let external_dim = particles.iter().map(|p| p.external).product();
        let internal_dim = particles.iter().map(|p| p.internal).product();

        let dims: Vec<usize> = particles.iter().map(ParticleDims::dim).collect();
        let ext: Vec<usize> = particles.iter().map(|p| p.external).collect();
        let int: Vec<usize> = particles.iter().map(|p| p.internal).collect();
        let mut external_of = vec![0u32; total_dim];
        let mut internal_of = vec![0u32; total_dim];
        let mut joined = vec![0u32; total_dim];
        for n in 0..total_dim {
            let per_particle = mixed_radix_decode(n, &dims);
            let xs: Vec<usize> = per_particle
                .iter()
                .zip(&particles)
                .map(|(&p, d)| p / d.internal)
                .collect();
            let ss: Vec<usize> = per_particle
                .iter()
                .zip(&particles)
                .map(|(&p, d)| p % d.internal)
                .collect();
            let x = mixed_radix_encode(&xs, &ext);
            let s = mixed_radix_encode(&ss, &int);
            external_of[n] = x as u32;
            internal_of[n] = s as u32;
            joined[x * internal_dim + s] = n as u32;
        }
        Ok(Self {
            particles,
            total_dim,
            external_dim,
            internal_dim,
            external_of,
            internal_of,
            joined,
        })
    }

    pub fn single(external: usize, internal: usize) -> Result<Self, SpaceError> {
        Self::new(vec![ParticleDims::new(external, internal)])
    }

    pub fn particles(&self) -> &[ParticleDims] {
        &self.particles
    }

    pub fn n_particles(&self) -> usize {
        self.particles.len()
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Number of joint external configurations `x`.
    pub fn external_dim(&self) -> usize {
        self.external_dim
    }

    /// Dimension of the joint spin block at fixed `x`.
    pub fn internal_dim(&self) -> usize {
        self.internal_dim
    }

    pub fn internal_dims(&self) -> Vec<usize> {
        self.particles.iter().map(|p| p.internal).collect()
    }

    /// Composite index from per-particle `(external, internal)` pairs.
    pub fn encode(&self, parts: &[(usize, usize)]) -> Result<usize, SpaceError> {
        if parts.len() != self.particles.len() {
            return Err(SpaceError::ArityMismatch {
                expected: self.particles.len(),
                got: parts.len(),
            });
        }
        let mut n = 0;
        for (&(e, s), d) in parts.iter().zip(&self.particles) {
            if e >= d.external {
                return Err(SpaceError::OutOfRange {
                    index: e,
                    dim: d.external,
                });
            }
            if s >= d.internal {
                return Err(SpaceError::OutOfRange {
                    index: s,
                    dim: d.internal,
                });
            }
            n = n * d.dim() + e * d.internal + s;
        }
        Ok(n)
    }

    pub fn decode(&self, n: usize) -> Result<Vec<(usize, usize)>, SpaceError> {
        self.check(n)?;
        let dims: Vec<usize> = self.particles.iter().map(ParticleDims::dim).collect();
        Ok(mixed_radix_decode(n, &dims)
            .into_iter()
            .zip(&self.particles)
            .map(|(p, d)| (p / d.internal, p % d.internal))
            .collect())
    }

    pub fn check(&self, n: usize) -> Result<(), SpaceError> {
        if n < self.total_dim {
            Ok(())
        } else {
            Err(SpaceError::OutOfRange {
                index: n,
                dim: self.total_dim,
            })
        }
    }

    /// Joint external configuration of composite index `n`.
    #[inline]
    pub fn external_of(&self, n: usize) -> usize {
        self.external_of[n] as usize
    }

    /// Joint spin configuration of composite index `n`.
    #[inline]
    pub fn internal_of(&self, n: usize) -> usize {
        self.internal_of[n] as usize
    }

    /// Composite index of joint external `x` and joint spin `s`.
    #[inline]
    pub fn join(&self, x: usize, s: usize) -> usize {
        self.joined[x * self.internal_dim + s] as usize
    }

    pub fn external_parts(&self, x: usize) -> Vec<usize> {
        let ext: Vec<usize> = self.particles.iter().map(|p| p.external).collect();
        mixed_radix_decode(x, &ext)
    }

    pub fn internal_parts(&self, s: usize) -> Vec<usize> {
        mixed_radix_decode(s, &self.internal_dims())
    }
}
