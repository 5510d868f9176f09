use serde::{Deserialize, Serialize};

use fiber_tensor::{Tensor, Var};

use crate::error::{contract, Result};

/// Axis-aligned box `(x1, y1, x2, y2)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    /// Inclusive containment (edges count as inside).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Distances `(l, t, r, b)` from a point to the four sides.
    pub fn ltrb_from(&self, x: f64, y: f64) -> [f64; 4] {
        [x - self.x1, y - self.y1, self.x2 - x, self.y2 - y]
    }

    pub fn from_ltrb(x: f64, y: f64, ltrb: [f64; 4]) -> BBox {
        BBox::new(x - ltrb[0], y - ltrb[1], x + ltrb[2], y + ltrb[3])
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − |C ∖ (A ∪ B)| / |C|` with `C` the smallest
/// enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(contract(format!("giou of degenerate box {a:?} / {b:?}")));
    }
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let c = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    Ok(inter / union - (c - union) / c)
}

pub fn giou_loss(a: &BBox, b: &BBox) -> Result<f64> {
    Ok(1.0 - giou(a, b)?)
}

/// `sqrt(min(l,r)/max(l,r) · min(t,b)/max(t,b))` for a location inside the box.
pub fn centerness(x: f64, y: f64, b: &BBox) -> Result<f64> {
    if !b.is_valid() || !b.contains(x, y) {
        return Err(contract(format!("location ({x}, {y}) outside box {b:?}")));
    }
    let [l, t, r, bt] = b.ltrb_from(x, y);
    Ok(((l.min(r) / l.max(r)) * (t.min(bt) / t.max(bt))).sqrt())
}

/// Per-location GIoU loss between predicted and target `(l, t, r, b)`
/// distances measured from the same point, `[N, 4]` each; returns `[N]`.
pub fn giou_loss_ltrb(pred: &Var, target: &Tensor) -> Result<Var> {
    let n = match pred.shape() {
        [n, 4] if target.shape() == [*n, 4] => *n,
        s => return Err(contract(format!("expected [N, 4] distances, got {s:?} and {:?}", target.shape()))),
    };
    let col = |v: &Var, i: usize| -> Result<Var> { Ok(v.transpose()?.narrow(0, i, 1)?.reshape(vec![n])?) };
    let t = Var::constant(target.clone());
    let (pl, pt, pr, pb) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (tl, tt, tr, tb) = (col(&t, 0)?, col(&t, 1)?, col(&t, 2)?, col(&t, 3)?);
    let pred_area = pl.add(&pr)?.mul(&pt.add(&pb)?)?;
    let target_area = tl.add(&tr)?.mul(&tt.add(&tb)?)?;
    let iw = pl.minimum(&tl)?.add(&pr.minimum(&tr)?)?;
    let ih = pt.minimum(&tt)?.add(&pb.minimum(&tb)?)?;
    let inter = iw.mul(&ih)?;
    let union = pred_area.add(&target_area)?.sub(&inter)?;
    let cw = pl.maximum(&tl)?.add(&pr.maximum(&tr)?)?;
    let ch = pt.maximum(&tt)?.add(&pb.maximum(&tb)?)?;
    let enclose = cw.mul(&ch)?;
    let g = inter.div(&union)?.sub(&enclose.sub(&union)?.div(&enclose)?)?;
    Ok(g.neg().add_scalar(1.0))
}

/// Binary cross-entropy with logits, elementwise: `softplus(x) − t·x`.
pub fn bce_with_logits(logits: &Var, targets: &Tensor) -> Result<Var> {
    Ok(logits.softplus().sub(&logits.mul(&Var::constant(targets.clone()))?)?)
}
