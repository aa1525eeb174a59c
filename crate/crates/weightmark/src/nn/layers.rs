//! Store-backed layers.
//!
//! A layer owns hyperparameters and [`ParamId`]s, never tensors. `forward`
//! reads from the store; `backward` takes the same input the forward pass saw
//! (the caller keeps activations), accumulates parameter gradients, and
//! returns the input gradient. Weight gradients are skipped entirely when the
//! parameter is frozen, which is most of the backward cost for a merged or
//! pretrained base.

use ndarray::{Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::Rng;

use super::conv;
use super::init;
use super::store::{GradStore, ParamId, ParamStore};

fn view1(store: &ParamStore, id: ParamId) -> ArrayView1<'_, f32> {
    store.get(id).view().into_dimensionality().unwrap()
}

fn view2(store: &ParamStore, id: ParamId) -> ArrayView2<'_, f32> {
    store.get(id).view().into_dimensionality().unwrap()
}

fn view3(store: &ParamStore, id: ParamId) -> ArrayView3<'_, f32> {
    store.get(id).view().into_dimensionality().unwrap()
}

fn view4(store: &ParamStore, id: ParamId) -> ArrayView4<'_, f32> {
    store.get(id).view().into_dimensionality().unwrap()
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Self {
        let fan_in = c_in * k;
        let weight = store.add(
            format!("{name}.weight"),
            init::fan_in_uniform(rng, &[c_out, c_in, k], fan_in),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            init::fan_in_uniform(rng, &[c_out], fan_in),
            true,
        );
        Self { weight, bias, stride, pad, dilation }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f32>) -> Array3<f32> {
        conv::conv1d_forward(
            x.view(),
            view3(store, self.weight),
            Some(view1(store, self.bias)),
            self.stride,
            self.pad,
            self.dilation,
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut GradStore,
        x: &Array3<f32>,
        dy: &Array3<f32>,
    ) -> Array3<f32> {
        let w = view3(store, self.weight);
        let (bsz, c_in, l) = x.dim();
        let (c_out, _, k) = w.dim();
        let w_mat = w.to_shape((c_out, c_in * k)).unwrap();
        let need_w = store.meta(self.weight).trainable;
        let mut dx = Array3::zeros((bsz, c_in, l));
        let mut dw_mat = Array2::<f32>::zeros((c_out, c_in * k));
        for b in 0..bsz {
            let dyb = dy.index_axis(Axis(0), b);
            if need_w {
                let cols = conv::im2col_1d(x.index_axis(Axis(0), b), k, self.stride, self.pad, self.dilation);
                dw_mat += &dyb.dot(&cols.t());
            }
            let dcols = w_mat.t().dot(&dyb);
            dx.index_axis_mut(Axis(0), b).assign(&conv::col2im_1d(
                dcols.view(),
                c_in,
                l,
                k,
                self.stride,
                self.pad,
                self.dilation,
            ));
        }
        if need_w {
            grads.accumulate(self.weight, dw_mat.into_shape_with_order(vec![c_out, c_in, k]).unwrap());
            grads.accumulate(self.bias, dy.sum_axis(Axis(0)).sum_axis(Axis(1)).into_dyn());
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * k;
        let weight = store.add(
            format!("{name}.weight"),
            init::fan_in_uniform(rng, &[c_in, c_out, k], fan_in),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            init::fan_in_uniform(rng, &[c_out], fan_in),
            true,
        );
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f32>) -> Array3<f32> {
        conv::convtr1d_forward(
            x.view(),
            view3(store, self.weight),
            Some(view1(store, self.bias)),
            self.stride,
            self.pad,
            1,
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut GradStore,
        x: &Array3<f32>,
        dy: &Array3<f32>,
    ) -> Array3<f32> {
        let w = view3(store, self.weight);
        let (bsz, c_in, l) = x.dim();
        let (_, c_out, k) = w.dim();
        let w_mat = w.to_shape((c_in, c_out * k)).unwrap();
        let need_w = store.meta(self.weight).trainable;
        let mut dx = Array3::zeros((bsz, c_in, l));
        let mut dw_mat = Array2::<f32>::zeros((c_in, c_out * k));
        for b in 0..bsz {
            let dyb = dy.index_axis(Axis(0), b);
            let dcols = conv::im2col_1d(dyb, k, self.stride, self.pad, 1);
            dx.index_axis_mut(Axis(0), b).assign(&w_mat.dot(&dcols));
            if need_w {
                dw_mat += &x.index_axis(Axis(0), b).dot(&dcols.t());
            }
        }
        if need_w {
            grads.accumulate(self.weight, dw_mat.into_shape_with_order(vec![c_in, c_out, k]).unwrap());
            grads.accumulate(self.bias, dy.sum_axis(Axis(0)).sum_axis(Axis(1)).into_dyn());
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub strides: (usize, usize),
    pub pads: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        strides: (usize, usize),
        pads: (usize, usize),
    ) -> Self {
        let fan_in = c_in * kernel.0 * kernel.1;
        let weight = store.add(
            format!("{name}.weight"),
            init::fan_in_uniform(rng, &[c_out, c_in, kernel.0, kernel.1], fan_in),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            init::fan_in_uniform(rng, &[c_out], fan_in),
            true,
        );
        Self { weight, bias, strides, pads }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array4<f32>) -> Array4<f32> {
        conv::conv2d_forward(
            x.view(),
            view4(store, self.weight),
            Some(view1(store, self.bias)),
            self.strides,
            self.pads,
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut GradStore,
        x: &Array4<f32>,
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let (dx, dw, db) =
            conv::conv2d_backward(x.view(), view4(store, self.weight), dy.view(), self.strides, self.pads);
        if store.meta(self.weight).trainable {
            grads.accumulate(self.weight, dw.into_dyn());
            grads.accumulate(self.bias, db.into_dyn());
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, f_in: usize, f_out: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init::fan_in_uniform(rng, &[f_out, f_in], f_in),
            true,
        );
        let bias = store.add(format!("{name}.bias"), init::fan_in_uniform(rng, &[f_out], f_in), true);
        Self { weight, bias }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f32>) -> Array2<f32> {
        let w = view2(store, self.weight);
        let b = view1(store, self.bias);
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            row += &b;
        }
        y
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut GradStore,
        x: &Array2<f32>,
        dy: &Array2<f32>,
    ) -> Array2<f32> {
        let w = view2(store, self.weight);
        let dx = dy.dot(&w);
        if store.meta(self.weight).trainable {
            grads.accumulate(self.weight, dy.t().dot(x).into_dyn());
            grads.accumulate(self.bias, dy.sum_axis(Axis(0)).into_dyn());
        }
        dx
    }
}
