//! Static decomposition of Z-ordered cubes over ranks.

use crate::error::{Error, Result};
use crate::lagrangian::ParticleSet;
use crate::mesh::CubeId;
use crate::transport::RankId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Basis {
    /// Contiguous Z-order blocks with closed-form ownership.
    Linear,
    /// Arbitrary cube -> rank map, e.g. after dynamic balancing.
    Explicit,
}

/// Number of cubes on rank `p` under the linear distribution of `n` cubes
/// over `ranks` ranks (0-based `p`).
pub fn linear_count(n: usize, ranks: usize, p: usize) -> usize {
    (n + ranks - p - 1) / ranks
}

/// Closed-form owner of Z-order position `index`.
pub fn owner_of(index: usize, n: usize, ranks: usize) -> Result<RankId> {
    if ranks == 0 {
        return Err(Error::InvalidRank { rank: 0, size: 0 });
    }
    if index >= n {
        return Err(Error::OutOfRange { index, len: n });
    }
    let l = n / ranks;
    let r = n % ranks;
    let big = r * (l + 1);
    Ok(RankId(if index < big {
        index / (l + 1)
    } else {
        r + (index - big) / l
    }))
}

/// Cube-to-rank assignment with local/global index maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Distribution {
    n_ranks: usize,
    basis: Basis,
    owners: Vec<RankId>,
    local_to_global: Vec<Vec<CubeId>>,
    global_to_local: Vec<usize>,
}

pub fn linear_distribution(n: usize, ranks: usize) -> Result<Distribution> {
    if ranks == 0 {
        return Err(Error::InvalidRank { rank: 0, size: 0 });
    }
    let mut owners = Vec::with_capacity(n);
    for p in 0..ranks {
        owners.extend(std::iter::repeat_n(RankId(p), linear_count(n, ranks, p)));
    }
    let mut d = Distribution::from_owners(owners, ranks)?;
    d.basis = Basis::Linear;
    Ok(d)
}

impl Distribution {
    /// Explicit-map distribution. Local order on each rank follows global id.
    pub fn from_owners(owners: Vec<RankId>, ranks: usize) -> Result<Self> {
        if ranks == 0 {
            return Err(Error::InvalidRank { rank: 0, size: 0 });
        }
        let mut local_to_global = vec![Vec::new(); ranks];
        let mut global_to_local = vec![0; owners.len()];
        for (g, r) in owners.iter().enumerate() {
            if r.0 >= ranks {
                return Err(Error::InvalidRank {
                    rank: r.0,
                    size: ranks,
                });
            }
            global_to_local[g] = local_to_global[r.0].len();
            local_to_global[r.0].push(g);
        }
        Ok(Self {
            n_ranks: ranks,
            basis: Basis::Explicit,
            owners,
            local_to_global,
            global_to_local,
        })
    }

    pub fn n_cubes(&self) -> usize {
        self.owners.len()
    }

    pub fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn counts(&self) -> Vec<usize> {
        self.local_to_global.iter().map(Vec::len).collect()
    }

    /// Global id of the first cube on each rank (linear mode only).
    pub fn offsets(&self) -> Option<Vec<usize>> {
        if self.basis != Basis::Linear {
            return None;
        }
        let mut acc = 0;
        Some(
            self.counts()
                .into_iter()
                .map(|c| {
                    let o = acc;
                    acc += c;
                    o
                })
                .collect(),
        )
    }

    pub fn owner(&self, cube: CubeId) -> RankId {
        self.owners[cube]
    }

    pub fn owners(&self) -> &[RankId] {
        &self.owners
    }

    pub fn local_cubes(&self, rank: RankId) -> &[CubeId] {
        &self.local_to_global[rank.0]
    }

    /// `(rank, local index)` of a global cube.
    pub fn locate(&self, cube: CubeId) -> (RankId, usize) {
        (self.owners[cube], self.global_to_local[cube])
    }

    pub fn local_index(&self, cube: CubeId) -> usize {
        self.global_to_local[cube]
    }
}

/// Hand each cube's particle set to the rank owning the cube. `sets` is
/// indexed by global cube id; the result holds, per rank, the sets of its
/// cubes in local order.
pub fn partition_lagrangian(sets: Vec<ParticleSet>, dist: &Distribution) -> Vec<Vec<ParticleSet>> {
    let mut slots: Vec<Option<ParticleSet>> = sets.into_iter().map(Some).collect();
    (0..dist.n_ranks())
        .map(|r| {
            dist.local_cubes(RankId(r))
                .iter()
                .map(|&g| slots[g].take().unwrap_or_else(|| ParticleSet::new(g)))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lagrangian::Particle;
    use proptest::prelude::*;

    #[test]
    fn counts_examples() {
        assert_eq!(
            linear_distribution(10, 4).unwrap().counts(),
            vec![3, 3, 2, 2]
        );
        assert_eq!(linear_distribution(7, 1).unwrap().counts(), vec![7]);
        assert_eq!(linear_distribution(0, 3).unwrap().counts(), vec![0, 0, 0]);
        assert!(linear_distribution(5, 0).is_err());
    }

    #[test]
    fn owner_examples() {
        // scan oracle: blocks 0-2 | 3-5 | 6-7 | 8-9
        assert_eq!(owner_of(0, 10, 4).unwrap(), RankId(0));
        assert_eq!(owner_of(6, 10, 4).unwrap(), RankId(2));
        assert_eq!(owner_of(9, 10, 4).unwrap(), RankId(3));
        assert!(owner_of(10, 10, 4).is_err());
    }

    #[test]
    fn explicit_map_index_roundtrip() {
        let owners = vec![RankId(1), RankId(0), RankId(1), RankId(2)];
        let d = Distribution::from_owners(owners, 3).unwrap();
        assert_eq!(d.local_cubes(RankId(1)), &[0, 2]);
        assert_eq!(d.locate(2), (RankId(1), 1));
        assert_eq!(d.offsets(), None);
    }

    #[test]
    fn lagrangian_follows_cube_owner() {
        let d = linear_distribution(4, 2).unwrap();
        let mut sets: Vec<ParticleSet> = (0..4).map(ParticleSet::new).collect();
        for (i, s) in sets.iter_mut().enumerate() {
            s.insert(Particle::new(i as u64, [0.0; 3], 1.0, 0));
        }
        let per_rank = partition_lagrangian(sets, &d);
        assert_eq!(
            per_rank[0].iter().map(|s| s.cube_id).collect::<Vec<_>>(),
            vec![0, 1]
        );
        assert_eq!(
            per_rank[1].iter().map(|s| s.cube_id).collect::<Vec<_>>(),
            vec![2, 3]
        );
        assert!(per_rank[1][0].contains(2));
    }

    proptest! {
        #[test]
        fn closed_form_matches_scan(n in 0usize..10_000, p in 1usize..=64) {
            let d = linear_distribution(n, p).unwrap();
            let counts = d.counts();
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            let max = *counts.iter().max().unwrap();
            let min = *counts.iter().min().unwrap();
            prop_assert!(max - min <= 1);
            let step = (n / 97).max(1);
            for i in (0..n).step_by(step) {
                prop_assert_eq!(owner_of(i, n, p).unwrap(), d.owner(i));
            }
        }
    }
}
