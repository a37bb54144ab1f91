use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::{Float, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn same_shape<T: Float>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

fn zip_map<T: Float>(g: &Graph<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data(a).iter().zip(g.data(b)).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(g.shape(a), data).expect("elementwise shape")
}

impl<T: Float> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let v = zip_map(self, a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let v = zip_map(self, a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::shape(
                "add_broadcast",
                format!("{sb:?} is not a trailing suffix of {sa:?}"),
            ));
        }
        let inner = self.value(b).len();
        let bd = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i % inner]).collect();
        let v = Tensor::new(self.shape(a), data)?;
        Ok(self.push(v, Op::AddBroadcast(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let v = zip_map(self, a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > T::ZERO { e } else { T::ZERO });
        self.push(v, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
        let v = self.value(x).map(|e| half * e * (T::ONE + (c * (e + a * e * e * e)).tanh()));
        self.push(v, Op::Gelu(x))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::from_usize(t.len()));
        self.push(v, Op::Mean(x))
    }
}

type Contribs<T> = Vec<(Var, Vec<T>)>;

pub(crate) fn add_backward<T: Float>(a: Var, b: Var, g: &[T], need: &dyn Fn(Var) -> bool) -> Contribs<T> {
    let mut out = Vec::new();
    if need(a) {
        out.push((a, g.to_vec()));
    }
    if need(b) {
        out.push((b, g.to_vec()));
    }
    out
}

pub(crate) fn sub_backward<T: Float>(a: Var, b: Var, g: &[T], need: &dyn Fn(Var) -> bool) -> Contribs<T> {
    let mut out = Vec::new();
    if need(a) {
        out.push((a, g.to_vec()));
    }
    if need(b) {
        out.push((b, g.iter().map(|&v| -v).collect()));
    }
    out
}

pub(crate) fn add_broadcast_backward<T: Float>(
    graph: &Graph<T>,
    a: Var,
    b: Var,
    g: &[T],
    need: &dyn Fn(Var) -> bool,
) -> Contribs<T> {
    let mut out = Vec::new();
    if need(a) {
        out.push((a, g.to_vec()));
    }
    if need(b) {
        let inner = graph.value(b).len();
        let mut gb = vec![T::ZERO; inner];
        for chunk in g.chunks(inner) {
            for (acc, &v) in gb.iter_mut().zip(chunk) {
                *acc += v;
            }
        }
        out.push((b, gb));
    }
    out
}

pub(crate) fn mul_backward<T: Float>(
    graph: &Graph<T>,
    a: Var,
    b: Var,
    g: &[T],
    need: &dyn Fn(Var) -> bool,
) -> Contribs<T> {
    let mut out = Vec::new();
    if need(a) {
        out.push((a, g.iter().zip(graph.data(b)).map(|(&gv, &bv)| gv * bv).collect()));
    }
    if need(b) {
        out.push((b, g.iter().zip(graph.data(a)).map(|(&gv, &av)| gv * av).collect()));
    }
    out
}

pub(crate) fn relu_backward<T: Float>(graph: &Graph<T>, x: Var, g: &[T]) -> Contribs<T> {
    let gx = g
        .iter()
        .zip(graph.data(x))
        .map(|(&gv, &xv)| if xv > T::ZERO { gv } else { T::ZERO })
        .collect();
    vec![(x, gx)]
}

pub(crate) fn gelu_backward<T: Float>(graph: &Graph<T>, x: Var, g: &[T]) -> Contribs<T> {
    let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
    let three = T::from_f64(3.0);
    let gx = g
        .iter()
        .zip(graph.data(x))
        .map(|(&gv, &e)| {
            let th = (c * (e + a * e * e * e)).tanh();
            let dinner = c * (T::ONE + three * a * e * e);
            gv * (half * (T::ONE + th) + half * e * (T::ONE - th * th) * dinner)
        })
        .collect();
    vec![(x, gx)]
}
