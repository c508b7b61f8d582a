//! Data-free training corpus: every `(t, x_t, u_t)` the frozen teacher
//! produces along its own Euler sampling trajectories.
//!
//! File layout, little-endian:
//!
//! ```text
//! magic "LVTJ" | u32 version
//! u64 record count | u32 trajectories | u32 seq_len | u32 d_state
//! f64 t_min_clamp | u32 grid length | f64 × grid length
//! records: f64 t | u32 trajectory id | u32 step index | f32 × n·d x_t | f32 × n·d u_t
//! terminals: f32 × n·d per trajectory (the t = 0 states, not training records)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::flow::{FlowSchedule, VelocityField};
use crate::model::checkpoint::{expect_end, get_bytes, get_f32s, get_u32, put_f32s, put_u32};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"LVTJ";
pub const TRAJECTORY_VERSION: u32 = 1;

/// Trajectories evaluated per teacher call during collection.
const COLLECT_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord<T> {
    pub t: f64,
    pub trajectory_id: u32,
    pub step_index: u32,
    /// `[seq_len, d_state]`
    pub x_t: DenseArray<T>,
    pub u_t: DenseArray<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet<T> {
    pub schedule: FlowSchedule,
    pub seq_len: usize,
    pub d_state: usize,
    pub records: Vec<TrajectoryRecord<T>>,
    /// Final `x₀` of each trajectory.
    pub terminals: Vec<DenseArray<T>>,
}

/// A training batch assembled from records.
#[derive(Clone, Debug)]
pub struct RecordBatch<T> {
    /// `[B, seq_len, d_state]`
    pub x: DenseArray<T>,
    pub u: DenseArray<T>,
    pub t: Vec<T>,
    /// Successor of each `t` on the grid.
    pub t_next: Vec<T>,
    pub indices: Vec<usize>,
}

fn round_f32<T: Scalar>(a: &DenseArray<T>) -> DenseArray<T> {
    a.map(|v| T::of(v.as_f32() as f64))
}

/// Runs the teacher from `n_trajectories` standard-normal starts (drawn
/// from `seed`) over `schedule` and keeps every model input/output pair.
/// Values are rounded to the stored 32-bit precision.
pub fn collect<T: Scalar, M: VelocityField<T> + ?Sized>(
    teacher: &M,
    schedule: &FlowSchedule,
    seq_len: usize,
    d_state: usize,
    n_trajectories: usize,
    seed: u64,
) -> Result<TrajectorySet<T>> {
    schedule.validate()?;
    if n_trajectories == 0 {
        return Err(Error::InvalidArgument("need at least one trajectory".into()));
    }
    let per = seq_len * d_state;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = DenseArray::<T>::randn(&[n_trajectories, seq_len, d_state], 1.0, &mut rng);
    let steps = schedule.steps();
    let mut records = Vec::with_capacity(n_trajectories * steps);
    let mut terminals = Vec::with_capacity(n_trajectories);
    for first in (0..n_trajectories).step_by(COLLECT_CHUNK) {
        let b = COLLECT_CHUNK.min(n_trajectories - first);
        let mut x = starts.row_slice(first, first + b)?;
        let mut chunk: Vec<Vec<TrajectoryRecord<T>>> = (0..b).map(|_| Vec::with_capacity(steps)).collect();
        for (step, (tp, t)) in schedule.pairs().enumerate() {
            let u = teacher.velocity(&x, &vec![T::of(tp); b])?;
            if u.shape() != x.shape() {
                return Err(Error::shape("collect", format!("teacher returned {:?} for {:?}", u.shape(), x.shape())));
            }
            for (j, recs) in chunk.iter_mut().enumerate() {
                let rows = j * per..(j + 1) * per;
                let uj = &u.data()[rows.clone()];
                if uj.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "teacher output for trajectory {} at t = {tp}",
                        first + j
                    )));
                }
                recs.push(TrajectoryRecord {
                    t: tp,
                    trajectory_id: (first + j) as u32,
                    step_index: step as u32,
                    x_t: round_f32(&DenseArray::new(&[seq_len, d_state], x.data()[rows].to_vec())?),
                    u_t: round_f32(&DenseArray::new(&[seq_len, d_state], uj.to_vec())?),
                });
            }
            let h = T::of(t - tp);
            x = u.zip_map(&x, "collect", |ui, xi| h * ui + xi)?;
        }
        for (j, recs) in chunk.into_iter().enumerate() {
            records.extend(recs);
            terminals.push(round_f32(&DenseArray::new(&[seq_len, d_state], x.data()[j * per..(j + 1) * per].to_vec())?));
        }
    }
    Ok(TrajectorySet {
        schedule: schedule.clone(),
        seq_len,
        d_state,
        records,
        terminals,
    })
}

impl<T: Scalar> TrajectorySet<T> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_trajectories(&self) -> usize {
        self.terminals.len()
    }

    /// Grid successor of record `i`'s time.
    pub fn next_time(&self, i: usize) -> f64 {
        self.schedule.grid[self.records[i].step_index as usize + 1]
    }

    /// Records whose successor time is at least `t_min`.
    pub fn indices_with_next_at_least(&self, t_min: f64) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.next_time(i) >= t_min).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<RecordBatch<T>> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let per = self.seq_len * self.d_state;
        let mut x = Vec::with_capacity(indices.len() * per);
        let mut u = Vec::with_capacity(indices.len() * per);
        let mut t = Vec::with_capacity(indices.len());
        let mut t_next = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = self
                .records
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("record {i} out of range")))?;
            x.extend_from_slice(r.x_t.data());
            u.extend_from_slice(r.u_t.data());
            t.push(T::of(r.t));
            t_next.push(T::of(self.next_time(i)));
        }
        let shape = [indices.len(), self.seq_len, self.d_state];
        Ok(RecordBatch {
            x: DenseArray::new(&shape, x)?,
            u: DenseArray::new(&shape, u)?,
            t,
            t_next,
            indices: indices.to_vec(),
        })
    }

    /// One epoch over `subset` (all records when `None`) in an order fixed by
    /// `shuffle_seed`; the last batch may be smaller.
    pub fn epoch_order(&self, subset: Option<&[usize]>, shuffle_seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = match subset {
            Some(s) => s.to_vec(),
            None => (0..self.len()).collect(),
        };
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        order
    }

    pub fn iterate_batches(&self, batch_size: usize, shuffle_seed: u64) -> Result<impl Iterator<Item = Result<RecordBatch<T>>> + '_> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let order = self.epoch_order(None, shuffle_seed);
        Ok((0..order.len().div_ceil(batch_size)).map(move |b| {
            let end = ((b + 1) * batch_size).min(order.len());
            self.batch(&order[b * batch_size..end])
        }))
    }

    /// Largest violation of `x_next = (t_next − t)·u_t + x_t` between
    /// consecutive records of one trajectory (terminals included).
    pub fn max_euler_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, r) in self.records.iter().enumerate() {
            let t_next = self.next_time(i);
            let next = match self.records.get(i + 1) {
                Some(n) if n.trajectory_id == r.trajectory_id => &n.x_t,
                _ => &self.terminals[r.trajectory_id as usize],
            };
            let h = t_next - r.t;
            for ((x, u), y) in r.x_t.data().iter().zip(r.u_t.data()).zip(next.data()) {
                let pred = h * u.as_f64() + x.as_f64();
                worst = worst.max((pred - y.as_f64()).abs());
            }
        }
        worst
    }

    /// Largest deviation between stored `u_t` and a fresh teacher evaluation.
    pub fn max_teacher_drift<M: VelocityField<T> + ?Sized>(&self, teacher: &M) -> Result<f64> {
        let mut worst = 0.0f64;
        let idx: Vec<usize> = (0..self.len()).collect();
        for chunk in idx.chunks(256) {
            let b = self.batch(chunk)?;
            let u = teacher.velocity(&b.x, &b.t)?;
            worst = worst.max(u.max_abs_diff(&b.u)?.as_f64());
        }
        Ok(worst)
    }

    pub fn stats(&self) -> TrajectoryStats {
        let steps = self.schedule.steps();
        let mut x_norm = vec![0.0; steps];
        let mut u_norm = vec![0.0; steps];
        let mut counts = vec![0usize; steps];
        for r in &self.records {
            let s = r.step_index as usize;
            x_norm[s] += r.x_t.sq_norm().as_f64().sqrt();
            u_norm[s] += r.u_t.sq_norm().as_f64().sqrt();
            counts[s] += 1;
        }
        let per_t = (0..steps)
            .map(|s| {
                let c = counts[s].max(1) as f64;
                (self.schedule.grid[s], x_norm[s] / c, u_norm[s] / c)
            })
            .collect();
        TrajectoryStats {
            count: self.len(),
            n_trajectories: self.n_trajectories(),
            grid: self.schedule.grid.clone(),
            per_t,
        }
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, TRAJECTORY_VERSION as usize)?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        put_u32(w, self.n_trajectories())?;
        put_u32(w, self.seq_len)?;
        put_u32(w, self.d_state)?;
        w.write_all(&self.schedule.t_min_clamp.to_le_bytes())?;
        put_u32(w, self.schedule.grid.len())?;
        for g in &self.schedule.grid {
            w.write_all(&g.to_le_bytes())?;
        }
        for r in &self.records {
            w.write_all(&r.t.to_le_bytes())?;
            put_u32(w, r.trajectory_id as usize)?;
            put_u32(w, r.step_index as usize)?;
            put_f32s(w, r.x_t.data())?;
            put_f32s(w, r.u_t.data())?;
        }
        for x in &self.terminals {
            put_f32s(w, x.data())?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let magic: [u8; 4] = get_bytes(r)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a trajectory file (bad magic)".into()));
        }
        let version = get_u32(r)? as u32;
        if version != TRAJECTORY_VERSION {
            return Err(Error::Format(format!(
                "unsupported trajectory file version {version} (expected {TRAJECTORY_VERSION})"
            )));
        }
        let count = u64::from_le_bytes(get_bytes(r)?) as usize;
        let n_traj = get_u32(r)?;
        let seq_len = get_u32(r)?;
        let d_state = get_u32(r)?;
        let t_min_clamp = f64::from_le_bytes(get_bytes(r)?);
        let grid_len = get_u32(r)?;
        if grid_len > 1 << 20 {
            return Err(Error::Format(format!("implausible grid length {grid_len}")));
        }
        let grid = (0..grid_len)
            .map(|_| get_bytes(r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let schedule = FlowSchedule::new(grid, t_min_clamp).map_err(|e| Error::Format(format!("bad grid: {e}")))?;
        if count != n_traj * schedule.steps() {
            return Err(Error::Format(format!(
                "{count} records for {n_traj} trajectories of {} steps",
                schedule.steps()
            )));
        }
        let per = seq_len * d_state;
        if per == 0 || per > 1 << 24 {
            return Err(Error::Format(format!("bad sample shape {seq_len} × {d_state}")));
        }
        let mut records = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            let t = f64::from_le_bytes(get_bytes(r)?);
            let trajectory_id = get_u32(r)? as u32;
            let step_index = get_u32(r)? as u32;
            if trajectory_id as usize >= n_traj || step_index as usize >= schedule.steps() {
                return Err(Error::Format(format!(
                    "record references trajectory {trajectory_id} step {step_index}"
                )));
            }
            if t != schedule.grid[step_index as usize] {
                return Err(Error::Format(format!("record time {t} is not on the grid at step {step_index}")));
            }
            let x_t = DenseArray::new(&[seq_len, d_state], get_f32s(r, per)?)?;
            let u_t = DenseArray::new(&[seq_len, d_state], get_f32s(r, per)?)?;
            if !x_t.all_finite() || !u_t.all_finite() {
                return Err(Error::Format(format!("non-finite values in trajectory {trajectory_id}")));
            }
            records.push(TrajectoryRecord {
                t,
                trajectory_id,
                step_index,
                x_t,
                u_t,
            });
        }
        let terminals = (0..n_traj)
            .map(|_| DenseArray::new(&[seq_len, d_state], get_f32s(r, per)?))
            .collect::<Result<Vec<_>>>()?;
        expect_end(r)?;
        Ok(Self {
            schedule,
            seq_len,
            d_state,
            records,
            terminals,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::read(&mut BufReader::new(file))
    }

    /// Terminal states stacked as `[n_trajectories, seq_len, d_state]`.
    pub fn terminal_batch(&self) -> Result<DenseArray<T>> {
        let mut data = Vec::with_capacity(self.terminals.len() * self.seq_len * self.d_state);
        for x in &self.terminals {
            data.extend_from_slice(x.data());
        }
        DenseArray::new(&[self.terminals.len(), self.seq_len, self.d_state], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStats {
    pub count: usize,
    pub n_trajectories: usize,
    pub grid: Vec<f64>,
    /// `(t, mean ‖x_t‖, mean ‖u_t‖)` per grid step.
    pub per_t: Vec<(f64, f64, f64)>,
}

impl std::fmt::Display for TrajectoryStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "records      {}", self.count)?;
        writeln!(f, "trajectories {}", self.n_trajectories)?;
        let grid: Vec<String> = self.grid.iter().map(|g| format!("{g:.4}")).collect();
        writeln!(f, "grid         [{}]", grid.join(", "))?;
        writeln!(f, "{:>8}  {:>10}  {:>10}", "t", "mean|x_t|", "mean|u_t|")?;
        for (t, x, u) in &self.per_t {
            writeln!(f, "{t:>8.4}  {x:>10.4}  {u:>10.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FnField;

    fn field() -> FnField<impl Fn(&DenseArray<f64>, &[f64]) -> Result<DenseArray<f64>>> {
        FnField(|x: &DenseArray<f64>, t: &[f64]| {
            let per = x.len() / t.len();
            Ok(DenseArray::from_fn(x.shape(), |i| 0.5 * x.data()[i] + t[i / per]))
        })
    }

    fn set(n: usize, seed: u64) -> TrajectorySet<f64> {
        collect(&field(), &FlowSchedule::uniform(8).unwrap(), 3, 2, n, seed).unwrap()
    }

    #[test]
    fn record_counts() {
        let s = set(1, 0);
        assert_eq!(s.len(), 8);
        assert_eq!(s.records[0].t, 1.0);
        assert_eq!(s.records[7].t, 0.125);
        assert!(s.records.iter().all(|r| r.t > 0.0));
        assert_eq!(set(70, 0).len(), 560);
    }

    #[test]
    fn round_trip_and_determinism() {
        let s = set(5, 3);
        let mut a = Vec::new();
        s.write(&mut a).unwrap();
        let back = TrajectorySet::<f64>::read(&mut a.as_slice()).unwrap();
        assert_eq!(back, s);
        let mut b = Vec::new();
        set(5, 3).write(&mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        set(5, 4).write(&mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn euler_recurrence_holds() {
        let s = set(4, 1);
        assert!(s.max_euler_residual() < 1e-5, "{}", s.max_euler_residual());
        assert!(s.max_teacher_drift(&field()).unwrap() < 1e-5);
    }

    #[test]
    fn batches_cover_epoch() {
        let s = set(3, 2);
        let all: Vec<_> = s.iterate_batches(s.len(), 0).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(all.len(), 1);
        let mut seen: Vec<usize> = s
            .iterate_batches(5, 7)
            .unwrap()
            .flat_map(|b| b.unwrap().indices)
            .collect();
        seen.sort();
        assert_eq!(seen, (0..s.len()).collect::<Vec<_>>());
        assert_ne!(s.epoch_order(None, 1), s.epoch_order(None, 2));
        assert!(s.iterate_batches(0, 0).is_err());
    }

    #[test]
    fn successor_filter_drops_last_step() {
        let s = set(2, 0);
        let idx = s.indices_with_next_at_least(0.02);
        assert_eq!(idx.len(), 14);
        assert!(idx.iter().all(|&i| s.records[i].step_index < 7));
    }

    #[test]
    fn rejects_bad_files() {
        let mut buf = Vec::new();
        set(2, 0).write(&mut buf).unwrap();
        let mut v = buf.clone();
        v[4] = 9;
        assert!(TrajectorySet::<f64>::read(&mut v.as_slice()).unwrap_err().to_string().contains("version 9"));
        let mut v = buf.clone();
        v[1] = b'x';
        assert!(matches!(TrajectorySet::<f64>::read(&mut v.as_slice()), Err(Error::Format(_))));
        let cut = &buf[..buf.len() - 10];
        assert!(matches!(TrajectorySet::<f64>::read(&mut &cut[..]), Err(Error::Format(_))));
        // header count disagrees with trajectories × steps
        let mut v = buf;
        v[8] = 15;
        assert!(matches!(TrajectorySet::<f64>::read(&mut v.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_teacher_aborts_with_id() {
        let bad = FnField(|x: &DenseArray<f64>, _: &[f64]| {
            let mut y = x.clone();
            let n = y.len();
            y.data_mut()[n - 1] = f64::NAN;
            Ok(y)
        });
        let e = collect(&bad, &FlowSchedule::uniform(2).unwrap(), 1, 2, 3, 0).unwrap_err();
        assert!(e.to_string().contains("trajectory 2"), "{e}");
    }
}
