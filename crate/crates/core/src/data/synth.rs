use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Sample, LAND, SEA};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorParams {
    /// Probability that an image carries ships at all.
    pub ship_probability: f64,
    pub max_ships: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            ship_probability: 0.5,
            max_ships: 3,
        }
    }
}

/// Generates `count` square `size x size` samples. Sample `k` draws from its
/// own ChaCha stream `k` of `seed`, so any subset can be regenerated alone.
pub fn generate_synthetic(seed: u64, count: usize, size: usize, params: &GeneratorParams) -> Result<Vec<Sample>> {
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::invalid(format!(
            "sample size {size} must be a positive multiple of 16"
        )));
    }
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    Ok((0..count).map(|k| generate_one(seed, k as u64, size, params)).collect())
}

fn generate_one(seed: u64, index: u64, size: usize, params: &GeneratorParams) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = size as f64;

    let coast = coastline(&mut rng, size);
    let vertical = rng.gen_bool(0.5);
    let land_before = rng.gen_bool(0.5);

    let mut mask = vec![SEA; size * size];
    for y in 0..size {
        for x in 0..size {
            // `along` runs with the coast, `across` crosses it
            let (along, across) = if vertical { (y, x) } else { (x, y) };
            let before = (across as f64 + 0.5) < coast[along];
            if before == land_before {
                mask[y * size + x] = LAND;
            }
        }
    }

    let sea_noise = ValueNoise::new(&mut rng, size);
    let land_noise = ValueNoise::new(&mut rng, size);
    let wave_period = rng.gen_range(n / 12.0..n / 6.0).max(2.0);
    let wave_phase = rng.gen_range(0.0..2.0 * PI);
    let mut image = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            image[i] = if mask[i] == SEA {
                let wave = (2.0 * PI * y as f64 / wave_period + wave_phase).sin();
                0.12 + 0.16 * sea_noise.at(x, y) + 0.04 * wave
            } else {
                0.5 + 0.4 * land_noise.at(x, y)
            };
        }
    }

    if rng.gen_bool(params.ship_probability) && params.max_ships > 0 {
        let ships = rng.gen_range(1..=params.max_ships);
        for _ in 0..ships {
            stamp_ship(&mut rng, size, &mut image, &mut mask);
        }
    }

    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }
    Sample::new(size, size, image, mask).expect("generator produces consistent sizes")
}

/// Coast offset for every position along the coast; stays within
/// `[0.28, 0.72] * size`.
fn coastline(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let n = size as f64;
    let mut walk = Vec::with_capacity(size);
    let mut v = 0.0;
    for _ in 0..size {
        v += rng.gen_range(-1.0..1.0);
        walk.push(v);
    }
    let radius = (size / 16).max(1) as isize;
    let smooth: Vec<f64> = (0..size as isize)
        .map(|i| {
            let lo = (i - radius).max(0) as usize;
            let hi = ((i + radius) as usize).min(size - 1);
            walk[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let mean = smooth.iter().sum::<f64>() / n;
    let spread = smooth.iter().map(|s| (s - mean).abs()).fold(0.0, f64::max);
    let amplitude = rng.gen_range(0.04..0.12) * n;
    let scale = if spread > 0.0 { amplitude / spread } else { 0.0 };
    let center = rng.gen_range(0.4..0.6) * n;
    smooth.iter().map(|s| center + (s - mean) * scale).collect()
}

/// Multi-octave value noise normalized to `[0, 1]`.
struct ValueNoise {
    octaves: Vec<(usize, Vec<f64>, f64)>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let mut octaves = Vec::new();
        let mut cell = (size / 2).max(2);
        let mut amp = 1.0;
        while cell >= 2 && octaves.len() < 4 {
            let cells = size / cell + 2;
            let lattice = (0..cells * cells).map(|_| rng.gen::<f64>()).collect();
            octaves.push((cell, lattice, amp));
            cell /= 2;
            amp *= 0.5;
        }
        let total: f64 = octaves.iter().map(|o| o.2).sum();
        for o in &mut octaves {
            o.2 /= total;
        }
        ValueNoise { octaves }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        self.octaves
            .iter()
            .map(|(cell, lattice, amp)| {
                let cells = (lattice.len() as f64).sqrt() as usize;
                let fx = x as f64 / *cell as f64;
                let fy = y as f64 / *cell as f64;
                let (x0, y0) = (fx as usize, fy as usize);
                let (tx, ty) = (smooth(fx - x0 as f64), smooth(fy - y0 as f64));
                let v = |i: usize, j: usize| lattice[j * cells + i];
                let top = v(x0, y0) * (1.0 - tx) + v(x0 + 1, y0) * tx;
                let bottom = v(x0, y0 + 1) * (1.0 - tx) + v(x0 + 1, y0 + 1) * tx;
                amp * (top * (1.0 - ty) + bottom * ty)
            })
            .sum()
    }
}

/// Stamps a small bright ellipse entirely on sea, labelled land. Gives up
/// quietly if no free spot is found.
fn stamp_ship(rng: &mut ChaCha8Rng, size: usize, image: &mut [f64], mask: &mut [u8]) {
    let n = size as f64;
    let ra = rng.gen_range(n / 40.0..n / 20.0).max(1.0);
    let rb = (ra * rng.gen_range(0.4..0.7)).max(0.75);
    let angle = rng.gen_range(0.0..PI);
    let brightness = rng.gen_range(0.85..0.97);
    let (ca, sa) = (angle.cos(), angle.sin());
    let reach = ra.ceil() as isize + 1;
    for _ in 0..32 {
        let cx = rng.gen_range(0.0..n);
        let cy = rng.gen_range(0.0..n);
        let inside = |x: isize, y: isize| {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * ca + dy * sa) / ra;
            let v = (-dx * sa + dy * ca) / rb;
            u * u + v * v <= 1.0
        };
        let mut pixels = Vec::new();
        let mut clear = true;
        for y in cy as isize - reach..=cy as isize + reach {
            for x in cx as isize - reach..=cx as isize + reach {
                if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                    if inside(x, y) {
                        clear = false;
                    }
                    continue;
                }
                let i = y as usize * size + x as usize;
                // keep a one-pixel band of sea around the hull
                let near = (-1..=1).any(|oy| (-1..=1).any(|ox| inside(x + ox, y + oy)));
                if near && mask[i] != SEA {
                    clear = false;
                }
                if inside(x, y) {
                    pixels.push(i);
                }
            }
        }
        if clear && !pixels.is_empty() {
            for i in pixels {
                mask[i] = LAND;
                image[i] = brightness;
            }
            return;
        }
    }
}
