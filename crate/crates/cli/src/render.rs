//! Label palette and attention heat maps.

use dipformer::model::IGNORE_LABEL;

const CITYSCAPES: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

/// One color per class. Past the fixed table, colors come from a spread of
/// hues that never repeat a table entry.
pub fn palette(n_cls: usize) -> Vec<[u8; 3]> {
    let mut out: Vec<[u8; 3]> = CITYSCAPES.iter().copied().take(n_cls).collect();
    let mut k = 0u32;
    while out.len() < n_cls {
        let c = [
            (37 + 97 * k % 211) as u8,
            (71 + 53 * k % 181) as u8,
            (13 + 151 * k % 239) as u8,
        ];
        k += 1;
        if !out.contains(&c) && c != [0, 0, 0] {
            out.push(c);
        }
    }
    out
}

/// Interleaved RGB for `labels`; ignored pixels are black.
pub fn colorize(labels: &[u8], n_cls: usize) -> Vec<u8> {
    let pal = palette(n_cls);
    labels
        .iter()
        .flat_map(|&l| match l {
            IGNORE_LABEL => [0, 0, 0],
            l => pal.get(l as usize).copied().unwrap_or([255, 255, 255]),
        })
        .collect()
}

fn ramp(t: f64) -> [u8; 3] {
    // dark blue -> purple -> orange -> pale yellow
    const STOPS: [[f64; 3]; 4] = [[0.0, 0.0, 0.2], [0.5, 0.1, 0.5], [0.95, 0.45, 0.1], [1.0, 1.0, 0.75]];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let mut c = [0u8; 3];
    for (k, v) in c.iter_mut().enumerate() {
        *v = ((STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f) * 255.0).round() as u8;
    }
    c
}

/// Max-normalized `p x p` weights as interleaved RGB, each cell drawn as a
/// `scale x scale` block.
pub fn heat_map(weights: &[f64], p: usize, scale: usize) -> Vec<u8> {
    let max = weights.iter().copied().fold(0.0, f64::max);
    let side = p * scale;
    let mut out = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let w = weights[(y / scale) * p + x / scale];
            out.extend(ramp(if max > 0.0 { w / max } else { 0.0 }));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_colors_are_distinct() {
        for n in [1, 3, 19, 40] {
            let p = palette(n);
            assert_eq!(p.len(), n);
            for (i, a) in p.iter().enumerate() {
                assert!(p[i + 1..].iter().all(|b| b != a));
            }
        }
        assert_eq!(palette(2), CITYSCAPES[..2].to_vec());
    }

    #[test]
    fn heat_map_blocks_follow_cells() {
        let img = heat_map(&[0.0, 1.0, 0.5, 0.25], 2, 3);
        assert_eq!(img.len(), 6 * 6 * 3);
        assert_eq!(&img[..3], &ramp(0.0));
        assert_eq!(&img[3 * 3..3 * 3 + 3], &ramp(1.0));
        assert_eq!(&img[(5 * 6 + 5) * 3..], &ramp(0.25));
    }
}
