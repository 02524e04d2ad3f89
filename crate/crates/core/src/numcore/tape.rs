//! Scalar reverse-mode tape.
//!
//! [`Tape::grad_graph`] records its backward pass as new nodes on the same
//! tape, so the returned gradients are themselves differentiable. Running
//! [`Tape::grad`] over an expression built from those nodes yields mixed
//! second-order derivatives (double backprop).

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    /// `acc + a * b`
    MulAdd(Var, Var, Var),
    /// `acc + c * a`
    FmaConst(Var, Var, f64),
    Tanh(Var),
    /// `g * (1 - z²)` where `z` is a tanh output.
    TanhGrad(Var, Var),
    Relu(Var),
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            ops: Vec::with_capacity(n),
            vals: Vec::with_capacity(n),
        }
    }

    /// Drops all nodes but keeps the allocation.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.vals.clear();
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.index()]
    }

    fn push(&mut self, op: Op, val: f64) -> Var {
        let i = self.ops.len();
        assert!(i < u32::MAX as usize, "tape overflow");
        self.ops.push(op);
        self.vals.push(val);
        Var(i as u32)
    }

    /// A leaf node. Constants are leaves nobody asks the gradient of.
    pub fn var(&mut self, val: f64) -> Var {
        self.push(Op::Leaf, val)
    }

    pub fn vars(&mut self, vals: &[f64]) -> Vec<Var> {
        vals.iter().map(|&v| self.var(v)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = c * self.value(a);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::AddConst(a), v)
    }

    pub fn mul_add(&mut self, acc: Var, a: Var, b: Var) -> Var {
        let v = self.value(acc) + self.value(a) * self.value(b);
        self.push(Op::MulAdd(acc, a, b), v)
    }

    pub fn fma_const(&mut self, acc: Var, a: Var, c: f64) -> Var {
        let v = self.value(acc) + c * self.value(a);
        self.push(Op::FmaConst(acc, a, c), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).max(0.0);
        self.push(Op::Relu(a), v)
    }

    fn tanh_grad(&mut self, z: Var, g: Var) -> Var {
        let zv = self.value(z);
        let v = self.value(g) * (1.0 - zv * zv);
        self.push(Op::TanhGrad(z, g), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Sum of `xs`; `None` for an empty slice.
    pub fn sum(&mut self, xs: &[Var]) -> Option<Var> {
        let (&first, rest) = xs.split_first()?;
        Some(rest.iter().fold(first, |acc, &x| self.add(acc, x)))
    }

    /// `Σ wᵢ·xᵢ` with constant weights, starting from `init`.
    pub fn weighted_sum(&mut self, init: Var, xs: &[Var], ws: &[f64]) -> Var {
        xs.iter()
            .zip(ws)
            .fold(init, |acc, (&x, &w)| self.fma_const(acc, x, w))
    }

    fn dependency_mask(&self, n: usize, wrt: &[Var]) -> Vec<bool> {
        let mut dep = vec![false; n];
        for w in wrt {
            if w.index() < n {
                dep[w.index()] = true;
            }
        }
        for i in 0..n {
            let d = match self.ops[i] {
                Op::Leaf => continue,
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::TanhGrad(a, b) => {
                    dep[a.index()] || dep[b.index()]
                }
                Op::Scale(a, _) | Op::AddConst(a) | Op::Tanh(a) | Op::Relu(a) => dep[a.index()],
                Op::MulAdd(c, a, b) => dep[c.index()] || dep[a.index()] || dep[b.index()],
                Op::FmaConst(c, a, _) => dep[c.index()] || dep[a.index()],
            };
            dep[i] = d;
        }
        dep
    }

    /// Reverse pass that records itself on the tape. Returns `∂output/∂w` for
    /// each `w` in `wrt` as a tape node, or `None` when it is structurally zero.
    pub fn grad_graph(&mut self, output: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        let n = output.index() + 1;
        let dep = self.dependency_mask(n, wrt);
        let mut adj: Vec<Option<Var>> = vec![None; n];
        if dep[output.index()] {
            adj[output.index()] = Some(self.var(1.0));
        }

        fn acc(tape: &mut Tape, adj: &mut [Option<Var>], dep: &[bool], x: Var, c: Var) {
            if !dep[x.index()] {
                return;
            }
            let slot = &mut adj[x.index()];
            *slot = Some(match *slot {
                None => c,
                Some(prev) => tape.add(prev, c),
            });
        }

        for i in (0..n).rev() {
            if !dep[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            match self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(self, &mut adj, &dep, a, g);
                    acc(self, &mut adj, &dep, b, g);
                }
                Op::Sub(a, b) => {
                    acc(self, &mut adj, &dep, a, g);
                    if dep[b.index()] {
                        let c = self.scale(g, -1.0);
                        acc(self, &mut adj, &dep, b, c);
                    }
                }
                Op::Mul(a, b) => {
                    if dep[a.index()] {
                        let c = self.mul(g, b);
                        acc(self, &mut adj, &dep, a, c);
                    }
                    if dep[b.index()] {
                        let c = self.mul(g, a);
                        acc(self, &mut adj, &dep, b, c);
                    }
                }
                Op::Scale(a, k) => {
                    let c = self.scale(g, k);
                    acc(self, &mut adj, &dep, a, c);
                }
                Op::AddConst(a) => acc(self, &mut adj, &dep, a, g),
                Op::MulAdd(s, a, b) => {
                    acc(self, &mut adj, &dep, s, g);
                    if dep[a.index()] {
                        let c = self.mul(g, b);
                        acc(self, &mut adj, &dep, a, c);
                    }
                    if dep[b.index()] {
                        let c = self.mul(g, a);
                        acc(self, &mut adj, &dep, b, c);
                    }
                }
                Op::FmaConst(s, a, k) => {
                    acc(self, &mut adj, &dep, s, g);
                    if dep[a.index()] {
                        let c = self.scale(g, k);
                        acc(self, &mut adj, &dep, a, c);
                    }
                }
                Op::Tanh(a) => {
                    let c = self.tanh_grad(Var(i as u32), g);
                    acc(self, &mut adj, &dep, a, c);
                }
                Op::TanhGrad(z, g0) => {
                    if dep[g0.index()] {
                        let c = self.tanh_grad(z, g);
                        acc(self, &mut adj, &dep, g0, c);
                    }
                    if dep[z.index()] {
                        let zg = self.mul(z, g0);
                        let zgg = self.mul(zg, g);
                        let c = self.scale(zgg, -2.0);
                        acc(self, &mut adj, &dep, z, c);
                    }
                }
                Op::Relu(a) => {
                    let step = if self.value(a) > 0.0 { 1.0 } else { 0.0 };
                    let c = self.scale(g, step);
                    acc(self, &mut adj, &dep, a, c);
                }
            }
        }
        wrt.iter()
            .map(|w| adj.get(w.index()).copied().flatten())
            .collect()
    }

    /// Plain numeric reverse pass: `∂output/∂w` for each `w` in `wrt`.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Vec<f64> {
        let n = output.index() + 1;
        let mut adj = vec![0.0; n];
        adj[output.index()] = 1.0;
        for i in (0..n).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    adj[a.index()] += g;
                    adj[b.index()] += g;
                }
                Op::Sub(a, b) => {
                    adj[a.index()] += g;
                    adj[b.index()] -= g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.vals[a.index()], self.vals[b.index()]);
                    adj[a.index()] += g * vb;
                    adj[b.index()] += g * va;
                }
                Op::Scale(a, k) => adj[a.index()] += g * k,
                Op::AddConst(a) => adj[a.index()] += g,
                Op::MulAdd(s, a, b) => {
                    let (va, vb) = (self.vals[a.index()], self.vals[b.index()]);
                    adj[s.index()] += g;
                    adj[a.index()] += g * vb;
                    adj[b.index()] += g * va;
                }
                Op::FmaConst(s, a, k) => {
                    adj[s.index()] += g;
                    adj[a.index()] += g * k;
                }
                Op::Tanh(a) => {
                    let z = self.vals[i];
                    adj[a.index()] += g * (1.0 - z * z);
                }
                Op::TanhGrad(z, g0) => {
                    let (vz, vg) = (self.vals[z.index()], self.vals[g0.index()]);
                    adj[g0.index()] += g * (1.0 - vz * vz);
                    adj[z.index()] += g * (-2.0 * vz * vg);
                }
                Op::Relu(a) => {
                    if self.vals[a.index()] > 0.0 {
                        adj[a.index()] += g;
                    }
                }
            }
        }
        wrt.iter()
            .map(|w| adj.get(w.index()).copied().unwrap_or(0.0))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_order_product_rule() {
        let mut t = Tape::new();
        let x = t.var(3.0);
        let y = t.var(-2.0);
        let xy = t.mul(x, y);
        let z = t.mul_add(xy, x, x); // xy + x²
        assert_eq!(t.value(z), 3.0);
        assert_eq!(t.grad(z, &[x, y]), vec![-2.0 + 6.0, 3.0]);
    }

    #[test]
    fn second_order_through_recorded_backward() {
        // f = tanh(w·x); df/dw = x(1 - tanh²); d/dx [(df/dw)²]
        let mut t = Tape::new();
        let w = t.var(0.7);
        let x = t.var(-1.3);
        let wx = t.mul(w, x);
        let f = t.tanh(wx);
        let dw = t.grad_graph(f, &[w])[0].unwrap();
        let h = t.square(dw);
        let got = t.grad(h, &[x])[0];

        let h_of = |x: f64| {
            let th = (0.7 * x).tanh();
            let d = x * (1.0 - th * th);
            d * d
        };
        let eps = 1e-6;
        let fd = (h_of(-1.3 + eps) - h_of(-1.3 - eps)) / (2.0 * eps);
        assert!((got - fd).abs() < 1e-7, "{got} vs {fd}");
    }

    #[test]
    fn independent_outputs_have_no_gradient_node() {
        let mut t = Tape::new();
        let a = t.var(1.0);
        let b = t.var(2.0);
        let c = t.scale(b, 3.0);
        assert_eq!(t.grad_graph(c, &[a, b])[0], None);
        assert!(t.grad_graph(c, &[a, b])[1].is_some());
    }

    #[test]
    fn relu_gradient_is_a_step() {
        let mut t = Tape::new();
        let a = t.var(-0.5);
        let b = t.var(0.5);
        let ra = t.relu(a);
        let rb = t.relu(b);
        let s = t.add(ra, rb);
        assert_eq!(t.grad(s, &[a, b]), vec![0.0, 1.0]);
    }
}
