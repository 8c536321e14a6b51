use crate::tensor::Tensor;

/// Eight location channels for a `gh × gw` feature grid.
///
/// Channels 0–2 hold the horizontal extent of each cell (min, center, max)
/// and channels 3–5 the vertical extent, all mapped to `[-1, 1]`. Channels 6
/// and 7 are the constant normalized cell width `1/gw` and height `1/gh`.
pub fn build_location_features(gh: usize, gw: usize) -> Tensor {
    assert!(gh >= 1 && gw >= 1, "location grid must be non-empty");
    let plane = gh * gw;
    let mut t = Tensor::zeros([8, gh, gw]);
    let d = t.data_mut();
    let edge = |i: usize, n: usize| -1.0 + 2.0 * i as f64 / n as f64;
    for y in 0..gh {
        for x in 0..gw {
            let p = y * gw + x;
            let (x0, x1) = (edge(x, gw), edge(x + 1, gw));
            let (y0, y1) = (edge(y, gh), edge(y + 1, gh));
            d[p] = x0;
            d[plane + p] = 0.5 * (x0 + x1);
            d[2 * plane + p] = x1;
            d[3 * plane + p] = y0;
            d[4 * plane + p] = 0.5 * (y0 + y1);
            d[5 * plane + p] = y1;
            d[6 * plane + p] = 1.0 / gw as f64;
            d[7 * plane + p] = 1.0 / gh as f64;
        }
    }
    t
}
