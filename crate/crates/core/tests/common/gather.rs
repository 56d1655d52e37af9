//! Brute-force index-arithmetic oracle for strided views, broadcasting and
//! writes through views.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbt::{ops, Device, Tensor};

/// Logical geometry of a view over a flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Geom {
    pub sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub offset: usize,
}

impl Geom {
    pub fn contiguous(sizes: &[usize]) -> Geom {
        let mut strides = vec![0; sizes.len()];
        let mut acc = 1;
        for d in (0..sizes.len()).rev() {
            strides[d] = acc;
            acc *= sizes[d];
        }
        Geom { sizes: sizes.to_vec(), strides, offset: 0 }
    }

    pub fn numel(&self) -> usize {
        self.sizes.iter().product()
    }

    /// Storage positions of every logical element, row-major.
    pub fn positions(&self) -> Vec<usize> {
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; self.sizes.len()];
        for _ in 0..n {
            out.push(self.offset + idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum::<usize>());
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < self.sizes[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        out
    }

    pub fn gather(&self, base: &[f64]) -> Vec<f64> {
        self.positions().into_iter().map(|p| base[p]).collect()
    }

    fn span(&self) -> usize {
        if self.numel() == 0 {
            return self.offset;
        }
        self.offset + self.sizes.iter().zip(&self.strides).map(|(n, s)| (n - 1) * s).sum::<usize>()
    }
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let x = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let y = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Value of `src` (row-major values with shape `shape`) at every element of
/// the broadcast `out` shape.
pub fn expand_values(src: &[f64], shape: &[usize], out: &[usize]) -> Vec<f64> {
    let lead = out.len() - shape.len();
    let g = Geom::contiguous(shape);
    let mut strides = vec![0; out.len()];
    for d in 0..shape.len() {
        strides[d + lead] = if shape[d] == 1 { 0 } else { g.strides[d] };
    }
    Geom { sizes: out.to_vec(), strides, offset: 0 }.gather(src)
}

fn distinct_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 + rng.gen_range(0..8) as f64 / 8.0 - 20.0).collect()
}

fn random_geom(rng: &mut ChaCha8Rng) -> Geom {
    let dims = rng.gen_range(0..=4);
    let sizes: Vec<usize> = (0..dims).map(|_| if rng.gen_bool(0.05) { 0 } else { rng.gen_range(1..=5) }).collect();
    let strides: Vec<usize> = (0..dims).map(|_| rng.gen_range(0..=6)).collect();
    Geom { sizes, strides, offset: rng.gen_range(0..4) }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn same(what: &str, got: &[f64], want: &[f64]) -> Result<(), String> {
    if bits(got) == bits(want) {
        Ok(())
    } else {
        Err(format!("{what}: got {got:?}, oracle {want:?}"))
    }
}

fn e(x: vbt::Error) -> String {
    x.to_string()
}

fn device_for(i: usize) -> Device {
    if i % 4 == 3 {
        Device::Virt(0)
    } else {
        Device::Host
    }
}

/// `as_strided` reads: values, reported geometry and `contiguous()`.
fn strided_read(rng: &mut ChaCha8Rng, dev: Device) -> Result<(), String> {
    let g = random_geom(rng);
    let extra = rng.gen_range(0..3);
    let base = distinct_values(rng, g.span() + 1 + extra);
    let t = Tensor::from_vec(base.clone(), &[base.len()], dev).map_err(e)?;
    let strides: Vec<i64> = g.strides.iter().map(|&s| s as i64).collect();
    let v = t.as_strided(&g.sizes, &strides, g.offset).map_err(e)?;
    if v.sizes() != g.sizes.as_slice() || v.offset() != g.offset {
        return Err(format!("geometry {:?}/{} vs {g:?}", v.sizes(), v.offset()));
    }
    let want = g.gather(&base);
    same("strided read", &v.to_vec::<f64>().map_err(e)?, &want)?;
    same("contiguous copy", &v.contiguous().map_err(e)?.to_vec::<f64>().map_err(e)?, &want)
}

/// Chains of transpose / narrow / expand views over a contiguous base,
/// tracked independently as geometry.
fn view_chain(rng: &mut ChaCha8Rng, dev: Device) -> Result<(), String> {
    let dims = rng.gen_range(1..=4);
    let sizes: Vec<usize> = (0..dims).map(|_| rng.gen_range(1..=5)).collect();
    let mut g = Geom::contiguous(&sizes);
    let base = distinct_values(rng, g.numel());
    let mut t = Tensor::from_vec(base.clone(), &sizes, dev).map_err(e)?;
    for _ in 0..rng.gen_range(1..=4) {
        let nd = g.sizes.len();
        match rng.gen_range(0..3) {
            0 if nd >= 2 => {
                let (a, b) = (rng.gen_range(0..nd), rng.gen_range(0..nd));
                t = t.transpose_view(a as i64, b as i64).map_err(e)?;
                g.sizes.swap(a, b);
                g.strides.swap(a, b);
            }
            1 => {
                let d = rng.gen_range(0..nd);
                let start = rng.gen_range(0..=g.sizes[d]);
                let len = rng.gen_range(0..=g.sizes[d] - start);
                t = t.narrow_view(d as i64, start, len).map_err(e)?;
                if len > 0 {
                    g.offset += start * g.strides[d];
                }
                g.sizes[d] = len;
            }
            _ => {
                let lead = rng.gen_range(0..=1);
                let mut target: Vec<usize> = (0..lead).map(|_| rng.gen_range(1..=3)).collect();
                let mut strides = vec![0; lead];
                for d in 0..nd {
                    if g.sizes[d] == 1 {
                        target.push(rng.gen_range(1..=4));
                        strides.push(0);
                    } else {
                        target.push(g.sizes[d]);
                        strides.push(g.strides[d]);
                    }
                }
                t = t.expand_view(&target).map_err(e)?;
                g.sizes = target;
                g.strides = strides;
            }
        }
    }
    if t.sizes() != g.sizes.as_slice() {
        return Err(format!("sizes {:?} vs model {:?}", t.sizes(), g.sizes));
    }
    same("view chain", &t.to_vec::<f64>().map_err(e)?, &g.gather(&base))
}

/// Strided operand of a given logical shape: a permuted, offset layout in a
/// larger buffer. Returns the tensor and its logical values.
fn strided_operand(rng: &mut ChaCha8Rng, shape: &[usize], dev: Device) -> Result<(Tensor, Vec<f64>), String> {
    let nd = shape.len();
    let mut perm: Vec<usize> = (0..nd).collect();
    perm.shuffle(rng);
    // physical layout: permuted dims, each padded by up to 1
    let phys: Vec<usize> = perm.iter().map(|&d| shape[d] + rng.gen_range(0..=1)).collect();
    let pg = Geom::contiguous(&phys);
    let offset = rng.gen_range(0..3);
    let mut strides = vec![0; nd];
    for (p, &d) in perm.iter().enumerate() {
        strides[d] = if shape[d] == 1 && rng.gen_bool(0.3) { 0 } else { pg.strides[p] };
    }
    let g = Geom { sizes: shape.to_vec(), strides, offset };
    let base = distinct_values(rng, offset + pg.numel().max(1));
    let buf = Tensor::from_vec(base.clone(), &[base.len()], dev).map_err(e)?;
    let st: Vec<i64> = g.strides.iter().map(|&s| s as i64).collect();
    let t = buf.as_strided(&g.sizes, &st, g.offset).map_err(e)?;
    Ok((t, g.gather(&base)))
}

fn broadcast_pair(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let nd = rng.gen_range(0..=4);
    let out: Vec<usize> = (0..nd).map(|_| rng.gen_range(1..=5)).collect();
    let pick = |rng: &mut ChaCha8Rng| {
        let drop = rng.gen_range(0..=nd);
        out[drop..].iter().map(|&s| if rng.gen_bool(0.3) { 1 } else { s }).collect::<Vec<_>>()
    };
    let a = pick(rng);
    let b = pick(rng);
    (a, b)
}

/// Broadcast binary ops over strided operands.
fn broadcast_binary(rng: &mut ChaCha8Rng, dev: Device) -> Result<(), String> {
    let (sa, sb) = broadcast_pair(rng);
    let out = broadcast(&sa, &sb).ok_or("oracle refused a compatible pair")?;
    let (a, va) = strided_operand(rng, &sa, dev)?;
    let (b, vb) = strided_operand(rng, &sb, dev)?;
    let ea = expand_values(&va, &sa, &out);
    let eb = expand_values(&vb, &sb, &out);
    let (name, got, want): (&str, Tensor, Vec<f64>) = match rng.gen_range(0..3) {
        0 => ("add", ops::add(&a, &b).map_err(e)?, ea.iter().zip(&eb).map(|(x, y)| x + y).collect()),
        1 => ("mul", ops::mul(&a, &b).map_err(e)?, ea.iter().zip(&eb).map(|(x, y)| x * y).collect()),
        _ => ("sub", ops::sub(&a, &b).map_err(e)?, ea.iter().zip(&eb).map(|(x, y)| x - y).collect()),
    };
    if got.sizes() != out.as_slice() {
        return Err(format!("{name}: shape {:?} vs {out:?}", got.sizes()));
    }
    same(name, &got.to_vec::<f64>().map_err(e)?, &want)
}

/// copy_ / add_ / fill_ into a permuted, narrowed view of a base buffer;
/// only the addressed storage elements change.
fn strided_write(rng: &mut ChaCha8Rng, dev: Device) -> Result<(), String> {
    let dims = rng.gen_range(1..=4);
    let sizes: Vec<usize> = (0..dims).map(|_| rng.gen_range(1..=5)).collect();
    let mut g = Geom::contiguous(&sizes);
    let base = distinct_values(rng, g.numel());
    let buf = Tensor::from_vec(base.clone(), &sizes, dev).map_err(e)?;
    let mut dst = buf.clone();
    for _ in 0..rng.gen_range(0..=3) {
        let nd = g.sizes.len();
        if rng.gen_bool(0.5) && nd >= 2 {
            let (a, b) = (rng.gen_range(0..nd), rng.gen_range(0..nd));
            dst = dst.transpose_view(a as i64, b as i64).map_err(e)?;
            g.sizes.swap(a, b);
            g.strides.swap(a, b);
        } else {
            let d = rng.gen_range(0..nd);
            let start = rng.gen_range(0..g.sizes[d]);
            let len = rng.gen_range(1..=g.sizes[d] - start);
            dst = dst.narrow_view(d as i64, start, len).map_err(e)?;
            g.offset += start * g.strides[d];
            g.sizes[d] = len;
        }
    }
    let positions = g.positions();
    let mut want = base.clone();
    let what = match rng.gen_range(0..3) {
        0 => {
            let v = rng.gen_range(-8..8) as f64 / 4.0;
            ops::fill_(&dst, v).map_err(e)?;
            for &p in &positions {
                want[p] = v;
            }
            "fill_"
        }
        k => {
            let keep = rng.gen_range(0..=g.sizes.len());
            let src_shape: Vec<usize> = g.sizes[keep..].iter().map(|&s| if rng.gen_bool(0.3) { 1 } else { s }).collect();
            let (src, sv) = strided_operand(rng, &src_shape, dev)?;
            let ev = expand_values(&sv, &src_shape, &g.sizes);
            if k == 1 {
                ops::copy_(&dst, &src).map_err(e)?;
                for (&p, &v) in positions.iter().zip(&ev) {
                    want[p] = v;
                }
                "copy_"
            } else {
                ops::add_(&dst, &src, 0.5).map_err(e)?;
                for (&p, &v) in positions.iter().zip(&ev) {
                    want[p] += 0.5 * v;
                }
                "add_"
            }
        }
    };
    same(what, &buf.to_vec::<f64>().map_err(e)?, &want)
}

pub const KINDS: [&str; 4] = ["strided_read", "view_chain", "broadcast_binary", "strided_write"];

/// Runs `n` randomized cases cycling through every kind; HOST and VIRT.
pub fn run_cases(seed: u64, n: usize) -> Result<[usize; 4], String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0; 4];
    for i in 0..n {
        let dev = device_for(i / 4);
        let r = match i % 4 {
            0 => strided_read(&mut rng, dev),
            1 => view_chain(&mut rng, dev),
            2 => broadcast_binary(&mut rng, dev),
            _ => strided_write(&mut rng, dev),
        };
        r.map_err(|m| format!("case {i} ({} on {dev}): {m}", KINDS[i % 4]))?;
        counts[i % 4] += 1;
    }
    Ok(counts)
}
