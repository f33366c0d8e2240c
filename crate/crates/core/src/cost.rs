//! Parameter and operation accounting with binarized-cost bookkeeping:
//! binarized parameters count at 1/32 of full precision, binarized
//! convolution operations at 1/64. Convolution work is counted as
//! 2*k*k*c_in*c_out*h_out*w_out (multiply-add = 2 ops); the report carries
//! the plain MAC totals alongside.

use serde::Serialize;

use crate::engine::{Engine, Param};
use crate::error::Result;
use crate::kernels::conv::{conv_output_dims, Pad2};
use crate::tensor::{Dims, Tensor4};

#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub binarized: bool,
    pub weight_params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub params_fp: u64,
    pub params_bin_fp_equiv: u64,
    pub params_total: f64,
    pub macs_fp: u64,
    pub macs_bin: u64,
    pub ops_fp: u64,
    pub ops_bin: u64,
    pub ops_total: f64,
    pub ops_total_mac_convention: f64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn human_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<28} {:>4} {:>14} {:>16}\n",
            "layer", "kind", "weight params", "MACs"
        ));
        for l in &self.layers {
            s.push_str(&format!(
                "{:<28} {:>4} {:>14} {:>16}\n",
                l.name,
                if l.binarized { "bin" } else { "fp" },
                l.weight_params,
                l.macs
            ));
        }
        s.push_str(&format!(
            "params: fp {} + bin {}/32 = {:.1} ({:.3} M)\n",
            self.params_fp,
            self.params_bin_fp_equiv,
            self.params_total,
            self.params_total / 1e6
        ));
        s.push_str(&format!(
            "ops (2*MAC): fp {} + bin {}/64 = {:.1} ({:.3} G)\n",
            self.ops_fp,
            self.ops_bin,
            self.ops_total,
            self.ops_total / 1e9
        ));
        s.push_str(&format!(
            "ops (MAC):   total {:.1} ({:.3} G)\n",
            self.ops_total_mac_convention,
            self.ops_total_mac_convention / 1e9
        ));
        s
    }
}

/// Shape-only engine: propagates dims and tallies convolution work.
pub struct CostEngine {
    pub layers: Vec<LayerCost>,
}

impl CostEngine {
    pub fn new() -> Self {
        CostEngine { layers: Vec::new() }
    }

    fn record(&mut self, w: &Param, x: Dims, binarized: bool, stride: usize, pad: usize) -> Result<Dims> {
        let wd = w.tensor().dims();
        let od = conv_output_dims(x, wd, stride, Pad2::uniform(pad))?;
        let macs = (wd.h * wd.w * wd.c * wd.n * od.h * od.w) as u64 * od.n as u64;
        self.layers.push(LayerCost {
            name: w.name.clone(),
            binarized,
            weight_params: wd.len() as u64,
            macs,
        });
        Ok(od)
    }

    pub fn macs_fp(&self) -> u64 {
        self.layers.iter().filter(|l| !l.binarized).map(|l| l.macs).sum()
    }

    pub fn macs_bin(&self) -> u64 {
        self.layers.iter().filter(|l| l.binarized).map(|l| l.macs).sum()
    }
}

impl Default for CostEngine {
    fn default() -> Self {
        Self::new()
    }
}

impl Engine for CostEngine {
    type Val = Dims;

    fn constant(&mut self, t: Tensor4) -> Result<Dims> {
        Ok(t.dims())
    }

    fn dims(&self, v: &Dims) -> Dims {
        *v
    }

    fn conv2d(
        &mut self,
        x: &Dims,
        w: &Param,
        _bias: Option<&Param>,
        stride: usize,
        pad: usize,
    ) -> Result<Dims> {
        self.record(w, *x, false, stride, pad)
    }

    fn binconv2d(&mut self, x: &Dims, w: &Param, stride: usize, pad: usize) -> Result<Dims> {
        self.record(w, *x, true, stride, pad)
    }

    fn add(&mut self, a: &Dims, _b: &Dims) -> Result<Dims> {
        Ok(*a)
    }

    fn add_param_bcast(&mut self, x: &Dims, _p: &Param) -> Result<Dims> {
        Ok(*x)
    }

    fn add_bcast(&mut self, x: &Dims, _b: &Dims) -> Result<Dims> {
        Ok(*x)
    }

    fn rprelu(&mut self, x: &Dims, _g: &Param, _z: &Param, _b: &Param) -> Result<Dims> {
        Ok(*x)
    }

    fn silu(&mut self, x: &Dims) -> Result<Dims> {
        Ok(*x)
    }

    fn pixel_shuffle(&mut self, x: &Dims, r: usize) -> Result<Dims> {
        Ok(Dims::new(x.n, x.c / (r * r), x.h * r, x.w * r))
    }

    fn pixel_unshuffle(&mut self, x: &Dims, r: usize) -> Result<Dims> {
        Ok(Dims::new(x.n, x.c * r * r, x.h / r, x.w / r))
    }

    fn concat_c(&mut self, a: &Dims, b: &Dims) -> Result<Dims> {
        Ok(Dims::new(a.n, a.c + b.c, a.h, a.w))
    }

    fn gather_c(&mut self, x: &Dims, idx: &[usize]) -> Result<Dims> {
        Ok(Dims::new(x.n, idx.len(), x.h, x.w))
    }
}

/// Assemble the report from a parameter walk plus a recorded forward.
pub fn report_from(params: &[&Param], engine: CostEngine) -> CostReport {
    let mut params_fp = 0u64;
    let mut params_bin = 0u64;
    for p in params {
        let n = p.tensor().len() as u64;
        if p.binarized {
            params_bin += n;
        } else {
            params_fp += n;
        }
    }
    let macs_fp = engine.macs_fp();
    let macs_bin = engine.macs_bin();
    let ops_fp = 2 * macs_fp;
    let ops_bin = 2 * macs_bin;
    CostReport {
        params_fp,
        params_bin_fp_equiv: params_bin,
        params_total: params_fp as f64 + params_bin as f64 / 32.0,
        macs_fp,
        macs_bin,
        ops_fp,
        ops_bin,
        ops_total: ops_fp as f64 + ops_bin as f64 / 64.0,
        ops_total_mac_convention: macs_fp as f64 + macs_bin as f64 / 64.0,
        layers: engine.layers,
    }
}

/// Cost of one UNet forward producing an `out_channels` x `h` x `w` output.
pub fn count_cost(net: &crate::unet::UNet, h: usize, w: usize) -> Result<CostReport> {
    use crate::blocks::TimestepCtx;
    let mut eng = CostEngine::new();
    let half = net.cfg.in_channels / 2;
    let x_t = eng.constant(Tensor4::zeros(Dims::new(1, half, h, w)))?;
    let y_up = eng.constant(Tensor4::zeros(Dims::new(1, net.cfg.in_channels - half, h, w)))?;
    net.forward(&mut eng, &x_t, &y_up, TimestepCtx { t: 1, t_total: 2000 })?;
    Ok(report_from(&net.params(), eng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ParamBuilder;

    #[test]
    fn single_binarized_conv_contributes_per_the_divisor_rules() {
        let mut pb = ParamBuilder::new();
        let w = pb.param("w", Tensor4::zeros(Dims::new(64, 64, 3, 3)), true);
        let mut eng = CostEngine::new();
        let x = eng.constant(Tensor4::zeros(Dims::new(1, 64, 64, 64))).unwrap();
        eng.binconv2d(&x, &w, 1, 1).unwrap();
        let report = report_from(&[&w], eng);
        assert_eq!(report.params_bin_fp_equiv, 36864);
        assert_eq!(report.params_total, 36864.0 / 32.0);
        assert_eq!(report.params_total, 1152.0);
        let macs = 9u64 * 64 * 64 * 64 * 64;
        assert_eq!(report.macs_bin, macs);
        assert_eq!(report.ops_total, (2 * macs) as f64 / 64.0);
    }

    #[test]
    fn two_walks_give_identical_reports() {
        let net = crate::unet::UNet::new(
            crate::unet::UNetConfig {
                levels: 2,
                n_e: 1,
                n_d: 1,
                base_channels: 8,
                k_pairs: 2,
                bottleneck_blocks: 1,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let a = count_cost(&net, 32, 32).unwrap();
        let b = count_cost(&net, 32, 32).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn pair_count_changes_params_but_not_ops() {
        let mk = |k: usize| {
            crate::unet::UNet::new(
                crate::unet::UNetConfig {
                    levels: 2,
                    n_e: 1,
                    n_d: 1,
                    base_channels: 8,
                    k_pairs: k,
                    bottleneck_blocks: 1,
                    ..Default::default()
                },
                3,
            )
            .unwrap()
        };
        let r1 = count_cost(&mk(1), 32, 32).unwrap();
        let r5 = count_cost(&mk(5), 32, 32).unwrap();
        assert_eq!(r1.ops_total, r5.ops_total);
        assert_eq!(r1.macs_bin, r5.macs_bin);
        assert!(r5.params_total > r1.params_total);
    }
}
