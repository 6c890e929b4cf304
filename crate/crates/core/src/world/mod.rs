//! Procedural navigation graphs with landmark-bearing panoramas, and episode
//! sampling over them.

mod library;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use library::{parse_phrases, LandmarkClass, LandmarkLibrary, DEFAULT_PHRASES};

use crate::error::{Error, Result};
use crate::rng;

pub const MIN_PATH_EDGES: usize = 3;
pub const MAX_PATH_EDGES: usize = 7;

const TIE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ValSeen, Split::ValUnseen];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Fine,
    Coarse,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fine => "fine",
            Mode::Coarse => "coarse",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(Mode::Fine),
            "coarse" => Ok(Mode::Coarse),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    /// Jittered grid; a random spanning tree over grid neighbours plus extra
    /// neighbour edges.
    Grid,
    Ring,
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Topology::Grid),
            "ring" => Ok(Topology::Ring),
            _ => Err(Error::Config(format!("unknown topology {s:?}"))),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Grid => "grid",
            Topology::Ring => "ring",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub nodes: usize,
    pub topology: Topology,
    pub k: usize,
    pub sigma_obs: f64,
    pub spacing: f64,
    pub jitter: f64,
    /// Probability of keeping each grid edge beyond the spanning tree.
    pub extra_edge_prob: f64,
    /// Probability that a navigable view shows a landmark.
    pub landmark_density: f64,
    /// Probability that a non-navigable view shows a landmark.
    pub clutter_density: f64,
    /// In unseen worlds, probability that a placement uses a held-out class.
    pub unseen_mix: f64,
    pub split: Split,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            nodes: 20,
            topology: Topology::Grid,
            k: 12,
            sigma_obs: 0.05,
            spacing: 1.6,
            jitter: 0.2,
            extra_edge_prob: 0.35,
            landmark_density: 0.8,
            clutter_density: 0.3,
            unseen_mix: 0.5,
            split: Split::Train,
        }
    }
}

impl WorldConfig {
    fn validate(&self) -> Result<()> {
        if self.nodes < 8 {
            return Err(Error::Config(format!("world needs at least 8 nodes, got {}", self.nodes)));
        }
        if self.sigma_obs < 0.0 || !self.sigma_obs.is_finite() {
            return Err(Error::Config(format!("sigma_obs must be non-negative, got {}", self.sigma_obs)));
        }
        for (name, p) in [
            ("extra_edge_prob", self.extra_edge_prob),
            ("landmark_density", self.landmark_density),
            ("clutter_density", self.clutter_density),
            ("unseen_mix", self.unseen_mix),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub id: usize,
    pub split: Split,
    pub k: usize,
    pub d_v: usize,
    pub sigma_obs: f64,
    pub positions: Vec<[f64; 2]>,
    /// Per node: (view index, neighbour), sorted by view index.
    pub views: Vec<Vec<(usize, usize)>>,
    /// Per node: (view index, class id), sorted by view index.
    pub placements: Vec<Vec<(usize, usize)>>,
    /// Stored panorama (clean feature plus one fixed noise draw), per node
    /// `k * d_v` values, row-major by view.
    pub panoramas: Vec<Vec<f64>>,
    /// Noise-free features, same layout as `panoramas`.
    clean: Vec<Vec<f64>>,
}

/// A panoramic observation: `k` view features of dimension `d_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Panorama {
    pub k: usize,
    pub d_v: usize,
    pub data: Vec<f64>,
}

impl Panorama {
    pub fn view(&self, j: usize) -> &[f64] {
        &self.data[j * self.d_v..(j + 1) * self.d_v]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: usize,
    pub world: usize,
    pub start: usize,
    pub goal: usize,
    pub path: Vec<usize>,
    pub mode: Mode,
    pub target: Option<usize>,
}

impl Episode {
    pub fn edges(&self) -> usize {
        self.path.len() - 1
    }
}

fn edge_view_slot(k: usize, angle: f64, taken: &[bool]) -> usize {
    let step = std::f64::consts::TAU / k as f64;
    let ideal = (angle.rem_euclid(std::f64::consts::TAU) / step).round() as usize % k;
    for off in 0..k {
        for cand in [(ideal + off) % k, (ideal + k - off % k) % k] {
            if !taken[cand] {
                return cand;
            }
        }
    }
    unreachable!("caller guarantees a free slot")
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = x;
        while self.0[c] != r {
            let n = self.0[c];
            self.0[c] = r;
            c = n;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Builds a world. Deterministic in `(config, library, seed)`.
pub fn generate_world(config: &WorldConfig, library: &LandmarkLibrary, id: usize, seed: u64) -> Result<World> {
    config.validate()?;
    if library.is_empty() {
        return Err(Error::Config("landmark library is empty".into()));
    }
    if library.d_v < 8 {
        return Err(Error::Config(format!("d_v must be at least 8, got {}", library.d_v)));
    }
    let n = config.nodes;
    let mut geo = rng::stream(seed, "world-geometry", 0);
    let (positions, edges) = match config.topology {
        Topology::Ring => {
            let radius = config.spacing * n as f64 / std::f64::consts::TAU;
            let pos = (0..n)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / n as f64;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect::<Vec<_>>();
            let edges = (0..n).map(|i| (i.min((i + 1) % n), i.max((i + 1) % n))).collect::<Vec<_>>();
            (pos, edges)
        }
        Topology::Grid => {
            let cols = (n as f64).sqrt().ceil() as usize;
            let pos = (0..n)
                .map(|i| {
                    let jx = geo.random_range(-config.jitter..=config.jitter);
                    let jy = geo.random_range(-config.jitter..=config.jitter);
                    [(i % cols) as f64 * config.spacing + jx, (i / cols) as f64 * config.spacing + jy]
                })
                .collect::<Vec<_>>();
            let mut cands = Vec::new();
            for i in 0..n {
                if (i % cols) + 1 < cols && i + 1 < n {
                    cands.push((i, i + 1));
                }
                if i + cols < n {
                    cands.push((i, i + cols));
                }
            }
            cands.shuffle(&mut geo);
            let mut uf = UnionFind((0..n).collect());
            let mut edges = Vec::new();
            let mut spare = Vec::new();
            for (a, b) in cands {
                if uf.union(a, b) {
                    edges.push((a, b));
                } else {
                    spare.push((a, b));
                }
            }
            for e in spare {
                if geo.random::<f64>() < config.extra_edge_prob {
                    edges.push(e);
                }
            }
            edges.sort_unstable();
            (pos, edges)
        }
    };

    let mut nbrs = vec![Vec::new(); n];
    for &(a, b) in &edges {
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    let max_degree = nbrs.iter().map(Vec::len).max().unwrap_or(0);
    if config.k < max_degree + 1 {
        return Err(Error::Config(format!(
            "K = {} views cannot hold a degree-{max_degree} node plus one free view",
            config.k
        )));
    }

    let mut views = Vec::with_capacity(n);
    for (node, list) in nbrs.iter_mut().enumerate() {
        list.sort_unstable();
        let mut taken = vec![false; config.k];
        let mut vs = Vec::with_capacity(list.len());
        for &m in list.iter() {
            let d = [positions[m][0] - positions[node][0], positions[m][1] - positions[node][1]];
            let slot = edge_view_slot(config.k, d[1].atan2(d[0]), &taken);
            taken[slot] = true;
            vs.push((slot, m));
        }
        vs.sort_unstable();
        views.push(vs);
    }

    let seen = library.seen_ids();
    let held = library.held_out_ids();
    if seen.is_empty() {
        return Err(Error::Config("landmark library has no seen classes".into()));
    }
    let mut place_rng = rng::stream(seed, "world-placements", 0);
    let mut placements = Vec::with_capacity(n);
    for node_views in &views {
        let mut used = HashSet::new();
        let mut ps = Vec::new();
        for view in 0..config.k {
            let navigable = node_views.iter().any(|&(v, _)| v == view);
            let p = if navigable { config.landmark_density } else { config.clutter_density };
            if place_rng.random::<f64>() >= p {
                continue;
            }
            let pool = if config.split == Split::ValUnseen && !held.is_empty() && place_rng.random::<f64>() < config.unseen_mix {
                &held
            } else {
                &seen
            };
            let fresh: Vec<usize> = pool.iter().copied().filter(|c| !used.contains(c)).collect();
            let class = *fresh.choose(&mut place_rng).or_else(|| pool.choose(&mut place_rng)).expect("nonempty pool");
            used.insert(class);
            ps.push((view, class));
        }
        placements.push(ps);
    }

    let mut world = World {
        id,
        split: config.split,
        k: config.k,
        d_v: library.d_v,
        sigma_obs: config.sigma_obs,
        positions,
        views,
        placements,
        panoramas: Vec::new(),
        clean: Vec::new(),
    };
    world.rebuild_clean(library)?;
    let mut noise_rng = rng::stream(seed, "world-noise", 0);
    world.panoramas = world.clean.iter().map(|c| world.noisy(c, &mut noise_rng)).collect();
    Ok(world)
}

impl World {
    /// Reassembles a world from serialized parts; the clean features are
    /// recomputed from the placements.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        id: usize,
        split: Split,
        k: usize,
        sigma_obs: f64,
        positions: Vec<[f64; 2]>,
        views: Vec<Vec<(usize, usize)>>,
        placements: Vec<Vec<(usize, usize)>>,
        panoramas: Vec<Vec<f64>>,
        library: &LandmarkLibrary,
    ) -> Result<Self> {
        let n = positions.len();
        if views.len() != n || placements.len() != n || panoramas.len() != n {
            return Err(Error::Format(format!("world {id}: per-node tables disagree on node count")));
        }
        if panoramas.iter().any(|p| p.len() != k * library.d_v) {
            return Err(Error::Format(format!("world {id}: panorama size mismatch")));
        }
        let mut w = Self {
            id,
            split,
            k,
            d_v: library.d_v,
            sigma_obs,
            positions,
            views,
            placements,
            panoramas,
            clean: Vec::new(),
        };
        w.rebuild_clean(library)?;
        Ok(w)
    }

    fn rebuild_clean(&mut self, library: &LandmarkLibrary) -> Result<()> {
        let mut clean = Vec::with_capacity(self.positions.len());
        for ps in &self.placements {
            let mut pano = Vec::with_capacity(self.k * self.d_v);
            for view in 0..self.k {
                match ps.iter().find(|&&(v, _)| v == view) {
                    Some(&(_, c)) => pano.extend_from_slice(&library.class(c)?.prototype),
                    None => pano.extend_from_slice(&library.background),
                }
            }
            clean.push(pano);
        }
        self.clean = clean;
        Ok(())
    }

    fn noisy<R: Rng + ?Sized>(&self, clean: &[f64], rng: &mut R) -> Vec<f64> {
        if self.sigma_obs == 0.0 {
            return clean.to_vec();
        }
        let normal = Normal::new(0.0, self.sigma_obs).expect("validated sigma");
        clean.iter().map(|&x| x + normal.sample(rng)).collect()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn check(&self, node: usize) -> Result<()> {
        if node < self.len() {
            Ok(())
        } else {
            Err(Error::Lookup(format!("node {node} not in world {} ({} nodes)", self.id, self.len())))
        }
    }

    /// The navigable views at `node` as (view index, neighbour) pairs.
    pub fn navigable(&self, node: usize) -> Result<&[(usize, usize)]> {
        self.check(node)?;
        Ok(&self.views[node])
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, vs) in self.views.iter().enumerate() {
            for &(_, b) in vs {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn max_degree(&self) -> usize {
        self.views.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.positions[a], self.positions[b]);
        (p[0] - q[0]).hypot(p[1] - q[1])
    }

    /// Class shown at (`node`, `view`), if any.
    pub fn class_at(&self, node: usize, view: usize) -> Option<usize> {
        self.placements[node].iter().find(|&&(v, _)| v == view).map(|&(_, c)| c)
    }

    pub fn view_towards(&self, node: usize, neighbour: usize) -> Option<usize> {
        self.views[node].iter().find(|&&(_, m)| m == neighbour).map(|&(v, _)| v)
    }

    pub fn clean_view(&self, node: usize, view: usize) -> &[f64] {
        &self.clean[node][view * self.d_v..(view + 1) * self.d_v]
    }

    /// A fresh observation: clean features plus newly drawn noise.
    pub fn observation_at<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> Result<Panorama> {
        self.check(node)?;
        Ok(Panorama { k: self.k, d_v: self.d_v, data: self.noisy(&self.clean[node], rng) })
    }

    /// The stored panorama (fixed noise realization).
    pub fn stored_observation(&self, node: usize) -> Result<Panorama> {
        self.check(node)?;
        Ok(Panorama { k: self.k, d_v: self.d_v, data: self.panoramas[node].clone() })
    }

    /// Breadth-first reachability from node 0.
    pub fn is_connected(&self) -> bool {
        if self.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.len()];
        let mut queue = std::collections::VecDeque::from([0]);
        seen[0] = true;
        while let Some(a) = queue.pop_front() {
            for &(_, b) in &self.views[a] {
                if !seen[b] {
                    seen[b] = true;
                    queue.push_back(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Edge-length distances from every node to `target`.
    pub fn distances_to(&self, target: usize) -> Vec<f64> {
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }
        let mut dist = vec![f64::INFINITY; self.len()];
        dist[target] = 0.0;
        let mut heap = BinaryHeap::from([Item(0.0, target)]);
        while let Some(Item(d, a)) = heap.pop() {
            if d > dist[a] {
                continue;
            }
            for &(_, b) in &self.views[a] {
                let nd = d + self.distance(a, b);
                if nd < dist[b] {
                    dist[b] = nd;
                    heap.push(Item(nd, b));
                }
            }
        }
        dist
    }

    /// Minimal-length path from `a` to `b`; among equally short paths the
    /// one whose next node has the smallest id at every step.
    pub fn shortest_path(&self, a: usize, b: usize) -> Result<(Vec<usize>, f64)> {
        self.check(a)?;
        self.check(b)?;
        let dist = self.distances_to(b);
        Ok(self.path_from(a, b, &dist))
    }

    fn path_from(&self, a: usize, b: usize, dist: &[f64]) -> (Vec<usize>, f64) {
        let mut path = vec![a];
        let mut cur = a;
        let mut len = 0.0;
        while cur != b {
            let mut next = None;
            for &(_, m) in &self.views[cur] {
                let via = self.distance(cur, m) + dist[m];
                if (via - dist[cur]).abs() <= TIE_EPS * dist[cur].max(1.0) && next.is_none_or(|n| m < n) {
                    next = Some(m);
                }
            }
            let m = next.expect("connected graph has a shortest-path successor");
            len += self.distance(cur, m);
            path.push(m);
            cur = m;
        }
        (path, len)
    }

    pub fn path_length(&self, nodes: &[usize]) -> f64 {
        nodes.windows(2).map(|w| self.distance(w[0], w[1])).sum()
    }

    /// Landmark class on the view leaving `path[t]` towards `path[t + 1]`.
    pub fn step_classes(&self, path: &[usize]) -> Vec<Option<usize>> {
        path.windows(2)
            .map(|w| self.view_towards(w[0], w[1]).and_then(|v| self.class_at(w[0], v)))
            .collect()
    }

    /// True when every step of the path shows a distinct landmark and none of
    /// those landmarks is visible on any other navigable view along the path
    /// or at the goal, so that landmarks alone identify the route.
    pub fn is_unambiguous(&self, path: &[usize]) -> bool {
        let classes = self.step_classes(path);
        let mut set = HashSet::new();
        for c in &classes {
            match c {
                Some(c) if set.insert(*c) => {}
                _ => return false,
            }
        }
        for (t, &node) in path.iter().enumerate() {
            let on_path = path.get(t + 1).copied();
            for &(view, m) in &self.views[node] {
                if Some(m) == on_path {
                    continue;
                }
                if self.class_at(node, view).is_some_and(|c| set.contains(&c)) {
                    return false;
                }
            }
        }
        true
    }
}

fn candidate_pairs(world: &World, mode: Mode) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for b in 0..world.len() {
        if mode == Mode::Coarse && world.placements[b].is_empty() {
            continue;
        }
        let dist = world.distances_to(b);
        for a in 0..world.len() {
            if a == b || !dist[a].is_finite() {
                continue;
            }
            let (path, _) = world.path_from(a, b, &dist);
            let e = path.len() - 1;
            if (MIN_PATH_EDGES..=MAX_PATH_EDGES).contains(&e) {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

fn episode_for(world: &World, id: usize, mode: Mode, pair: (usize, usize), rng: &mut impl Rng) -> Episode {
    let (path, _) = world.shortest_path(pair.0, pair.1).expect("nodes exist");
    let target = match mode {
        Mode::Fine => None,
        Mode::Coarse => world.placements[pair.1].choose(rng).map(|&(_, c)| c),
    };
    Episode { id, world: world.id, start: pair.0, goal: pair.1, path, mode, target }
}

/// Draws a start/goal pair whose shortest path has 3 to 7 edges.
pub fn sample_episode(world: &World, mode: Mode, id: usize, seed: u64) -> Result<Episode> {
    let pairs = candidate_pairs(world, mode);
    let mut r = rng::stream(seed, "episode", 0);
    let pair = *pairs
        .choose(&mut r)
        .ok_or_else(|| Error::Sampling(format!("world {} has no start/goal pair 3..=7 edges apart", world.id)))?;
    Ok(episode_for(world, id, mode, pair, &mut r))
}

/// Samples `count` episodes from one world. With `unambiguous`, only routes
/// that landmarks alone disambiguate are eligible.
pub fn sample_episodes(world: &World, mode: Mode, count: usize, first_id: usize, unambiguous: bool, seed: u64) -> Result<Vec<Episode>> {
    let mut pairs = candidate_pairs(world, mode);
    if unambiguous {
        pairs.retain(|&(a, b)| world.shortest_path(a, b).map(|(p, _)| world.is_unambiguous(&p)).unwrap_or(false));
    }
    if pairs.is_empty() && count > 0 {
        return Err(Error::Sampling(format!("world {} has no eligible start/goal pair", world.id)));
    }
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, "episode", i as u64);
            let pair = *pairs.choose(&mut r).expect("nonempty");
            Ok(episode_for(world, first_id + i, mode, pair, &mut r))
        })
        .collect()
}
