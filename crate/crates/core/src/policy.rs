//! The per-agent variational recurrent policy with FiLM target-speed
//! conditioning.
//!
//! One step encodes the birdview (plus the agent's own speed, which a single
//! frame cannot show), draws a latent from the prior or from the posterior
//! given the ground-truth action, decodes an action mean and updates a GRU
//! state on `(action, features, z)`. Target speeds enter through FiLM blocks
//! on the encoder projection and both decoder hidden layers; without a target
//! speed those blocks are skipped entirely.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvShape, Graph, ParamId, ParamSet, Var};
use crate::raster::{BirdviewRaster, RasterConfig};
use crate::scene::{Action, ACCEL_MAX, STEER_MAX};

pub const ARCH_VERSION: u32 = 1;
pub const SPEED_SCALE: f64 = 30.0;
const SIGMA_FLOOR: f64 = 1e-4;

/// Layer sizes of a policy. Stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub version: u32,
    pub raster_size: usize,
    pub meters_per_pixel: f64,
    pub channels: [usize; 3],
    pub feature: usize,
    pub hidden: usize,
    pub latent: usize,
    pub film: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            version: ARCH_VERSION,
            raster_size: 64,
            meters_per_pixel: 0.5,
            channels: [8, 16, 16],
            feature: 64,
            hidden: 64,
            latent: 16,
            film: true,
        }
    }
}

impl Architecture {
    /// A narrow network for fast checks on small rasters.
    pub fn small(raster_size: usize) -> Self {
        Self {
            raster_size,
            channels: [4, 4, 4],
            feature: 16,
            hidden: 16,
            latent: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != ARCH_VERSION {
            return Err(Error::Version { expected: ARCH_VERSION.to_string(), found: self.version.to_string() });
        }
        if self.raster_size < 8 || self.raster_size % 8 != 0 {
            return Err(Error::Config(format!("raster size must be a positive multiple of 8, got {}", self.raster_size)));
        }
        if self.channels.contains(&0) || self.feature == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.meters_per_pixel > 0.0) {
            return Err(Error::Config("meters_per_pixel must be positive".into()));
        }
        Ok(())
    }

    pub fn raster_config(&self) -> RasterConfig {
        RasterConfig { size: self.raster_size, meters_per_pixel: self.meters_per_pixel }
    }

    fn conv_shapes(&self) -> [ConvShape; 3] {
        let mut size = self.raster_size;
        let mut inc = 3;
        self.channels.map(|out| {
            let s = ConvShape { in_channels: inc, out_channels: out, size, kernel: 3, stride: 2, pad: 1 };
            size = s.out_size();
            inc = out;
            s
        })
    }

    fn flat_width(&self) -> usize {
        let c = self.conv_shapes()[2];
        c.out_channels * c.out_size() * c.out_size()
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FilmPair {
    gamma: Dense,
    beta: Dense,
}

#[derive(Debug, Clone)]
struct Layout {
    conv: [(ParamId, ParamId, ConvShape); 3],
    proj: Dense,
    post_hidden: Dense,
    post_mu: Dense,
    post_sigma: Dense,
    dec1: Dense,
    dec2: Dense,
    head: Dense,
    gru_gates: Dense,
    gru_nx: Dense,
    gru_nh: Dense,
    film: Option<[FilmPair; 3]>,
}

/// Where the step's latent comes from. `eps` is the standard-normal draw.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentSource {
    Prior { eps: Vec<f64> },
    Posterior { action: Action, eps: Vec<f64> },
}

/// Graph handles produced by one policy step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub action: Var,
    pub h_next: Var,
    pub z: Var,
    pub posterior: Option<(Var, Var)>,
}

/// Plain values produced by [`Policy::policy_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub action: Action,
    pub h_next: Vec<f64>,
    pub z: Vec<f64>,
    pub posterior: Option<(Vec<f64>, Vec<f64>)>,
}

/// Which latent distribution a convenience step samples from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZSource {
    Prior,
    Posterior(Action),
}

/// Architecture plus learnable tensors.
#[derive(Debug, Clone)]
pub struct Policy {
    arch: Architecture,
    params: ParamSet,
    layout: Layout,
}

fn dense<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, out: usize, inp: usize, gain: f64, rng: &mut R) -> Dense {
    let w = ps.add_uniform(&format!("{name}.w"), &[out, inp], inp, gain, rng);
    let b = ps.add_zeros(&format!("{name}.b"), &[out]);
    Dense { w, b }
}

fn zero_dense(ps: &mut ParamSet, name: &str, out: usize, inp: usize) -> Dense {
    let w = ps.add_zeros(&format!("{name}.w"), &[out, inp]);
    let b = ps.add_zeros(&format!("{name}.b"), &[out]);
    Dense { w, b }
}

impl Policy {
    /// Fresh parameters. FiLM generators start at γ = 1, β = 0.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut ps = ParamSet::new();
        let shapes = arch.conv_shapes();
        let mut conv = Vec::new();
        for (i, s) in shapes.iter().enumerate() {
            let w = ps.add_uniform(&format!("enc.conv{}.w", i + 1), &s.weight_shape(), s.fan_in(), 1.0, rng);
            let b = ps.add_zeros(&format!("enc.conv{}.b", i + 1), &[s.out_channels]);
            conv.push((w, b, *s));
        }
        let (f, h, l) = (arch.feature, arch.hidden, arch.latent);
        let proj = dense(&mut ps, "enc.proj", f, arch.flat_width() + 1, 1.0, rng);
        let post_hidden = dense(&mut ps, "post.hidden", h, 2 + f + h, 1.0, rng);
        let post_mu = dense(&mut ps, "post.mu", l, h, 0.1, rng);
        let post_sigma = dense(&mut ps, "post.sigma", l, h, 0.1, rng);
        // softplus(b) = 1 so the initial posterior sits on the prior's scale.
        ps.get_mut(post_sigma.b).data.fill((std::f64::consts::E - 1.0).ln());
        let dec1 = dense(&mut ps, "dec.l1", h, f + l + h, 1.0, rng);
        let dec2 = dense(&mut ps, "dec.l2", h, h, 1.0, rng);
        let head = dense(&mut ps, "dec.head", 2, h, 0.1, rng);
        let gx = 2 + f + l;
        let gru_gates = dense(&mut ps, "gru.gates", 2 * h, gx + h, 1.0, rng);
        let gru_nx = dense(&mut ps, "gru.nx", h, gx, 1.0, rng);
        let gru_nh = dense(&mut ps, "gru.nh", h, h, 1.0, rng);
        let film = arch.film.then(|| {
            let widths = [f, h, h];
            let mut k = 0;
            widths.map(|w| {
                k += 1;
                FilmPair {
                    gamma: zero_dense(&mut ps, &format!("film{k}.gamma"), w, 1 + h),
                    beta: zero_dense(&mut ps, &format!("film{k}.beta"), w, 1 + h),
                }
            })
        });
        let layout = Layout {
            conv: [conv[0], conv[1], conv[2]],
            proj,
            post_hidden,
            post_mu,
            post_sigma,
            dec1,
            dec2,
            head,
            gru_gates,
            gru_nx,
            gru_nh,
            film,
        };
        Ok(Self { arch, params: ps, layout })
    }

    /// Rebuilds a policy around loaded tensors, checking every name and shape.
    pub fn from_params(arch: Architecture, loaded: &ParamSet) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut policy = Self::new(arch, &mut rng)?;
        for (_, name, t) in policy.params.iter() {
            match loaded.by_name(name) {
                Some(src) if src.shape == t.shape => {}
                Some(src) => {
                    return Err(Error::Shape(format!("tensor {name}: expected {:?}, found {:?}", t.shape, src.shape)))
                }
                None => return Err(Error::NotFound(format!("tensor {name}"))),
            }
        }
        if loaded.len() != policy.params.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                policy.params.len(),
                loaded.len()
            )));
        }
        policy.params.copy_matching_from(loaded);
        Ok(policy)
    }

    /// The same tensors with FiLM generators structurally removed.
    pub fn without_film(&self) -> Self {
        let mut arch = self.arch.clone();
        arch.film = false;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut stripped = Self::new(arch, &mut rng).expect("architecture already validated");
        stripped.params.copy_matching_from(&self.params);
        stripped
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn has_film(&self) -> bool {
        self.layout.film.is_some()
    }

    pub fn initial_state(&self) -> Vec<f64> {
        vec![0.0; self.arch.hidden]
    }

    pub fn draw_eps<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.arch.latent).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn film(&self, g: &mut Graph, x: Var, k: usize, cond: Option<Var>) -> Var {
        match (self.layout.film, cond) {
            (Some(pairs), Some(c)) => {
                let p = pairs[k];
                let graw = g.linear(c, p.gamma.w, p.gamma.b);
                let beta = g.linear(c, p.beta.w, p.beta.b);
                let scaled = g.mul(x, graw);
                let y = g.add(x, scaled);
                g.add(y, beta)
            }
            _ => x,
        }
    }

    /// Appends one policy step to `g`. `raster` is the channel-major image
    /// and `speed` a one-element node holding the agent's speed in m/s.
    pub fn step_graph(
        &self,
        g: &mut Graph,
        raster: Var,
        speed: Var,
        h: Var,
        target_speed: Option<f64>,
        latent: &LatentSource,
    ) -> Result<StepVars> {
        let lay = &self.layout;
        let cond = match target_speed {
            Some(v) if self.has_film() => {
                let vin = g.input(vec![v / SPEED_SCALE]);
                Some(g.concat(&[vin, h]))
            }
            _ => None,
        };

        let mut x = raster;
        for (w, b, s) in lay.conv {
            let c = g.conv2d(x, w, b, s);
            x = g.relu(c);
        }
        let sp = g.scale(speed, 1.0 / SPEED_SCALE);
        let flat = g.concat(&[x, sp]);
        let proj = g.linear(flat, lay.proj.w, lay.proj.b);
        let proj = self.film(g, proj, 0, cond);
        let feat = g.relu(proj);

        let (z, posterior) = match latent {
            LatentSource::Prior { eps } => (g.input(eps.clone()), None),
            LatentSource::Posterior { action, eps } => {
                let a = g.input(normalized_action(action).to_vec());
                let pin = g.concat(&[a, feat, h]);
                let ph = g.linear(pin, lay.post_hidden.w, lay.post_hidden.b);
                let ph = g.relu(ph);
                let mu = g.linear(ph, lay.post_mu.w, lay.post_mu.b);
                let sraw = g.linear(ph, lay.post_sigma.w, lay.post_sigma.b);
                let sp = g.softplus(sraw);
                let floor = g.input(vec![SIGMA_FLOOR; self.arch.latent]);
                let sigma = g.add(sp, floor);
                let e = g.input(eps.clone());
                let noise = g.mul(sigma, e);
                (g.add(mu, noise), Some((mu, sigma)))
            }
        };

        let din = g.concat(&[feat, z, h]);
        let d1 = g.linear(din, lay.dec1.w, lay.dec1.b);
        let d1 = self.film(g, d1, 1, cond);
        let d1 = g.relu(d1);
        let d2 = g.linear(d1, lay.dec2.w, lay.dec2.b);
        let d2 = self.film(g, d2, 2, cond);
        let d2 = g.relu(d2);
        let action = g.linear(d2, lay.head.w, lay.head.b);

        let an = g.scale_each(action, &[1.0 / ACCEL_MAX, 1.0 / STEER_MAX]);
        let gx = g.concat(&[an, feat, z]);
        let gxh = g.concat(&[gx, h]);
        let gates = g.linear(gxh, lay.gru_gates.w, lay.gru_gates.b);
        let gates = g.sigmoid(gates);
        let hd = self.arch.hidden;
        let u = g.slice(gates, 0, hd);
        let r = g.slice(gates, hd, hd);
        let nx = g.linear(gx, lay.gru_nx.w, lay.gru_nx.b);
        let nh = g.linear(h, lay.gru_nh.w, lay.gru_nh.b);
        let rn = g.mul(r, nh);
        let pre = g.add(nx, rn);
        let n = g.tanh(pre);
        let keep = g.sub(h, n);
        let kept = g.mul(u, keep);
        let h_next = g.add(n, kept);

        g.check_finite(action, "action mean")?;
        g.check_finite(h_next, "recurrent state")?;
        Ok(StepVars { action, h_next, z, posterior })
    }

    /// One step on plain values; draws the latent noise from `rng`.
    pub fn policy_step<R: Rng + ?Sized>(
        &self,
        raster: &BirdviewRaster,
        speed: f64,
        h: &[f64],
        target_speed: Option<f64>,
        source: ZSource,
        rng: &mut R,
    ) -> Result<PolicyOutput> {
        let eps = self.draw_eps(rng);
        let latent = match source {
            ZSource::Prior => LatentSource::Prior { eps },
            ZSource::Posterior(action) => LatentSource::Posterior { action, eps },
        };
        self.step_values(raster, speed, h, target_speed, &latent)
    }

    /// One step with an explicit latent source.
    pub fn step_values(
        &self,
        raster: &BirdviewRaster,
        speed: f64,
        h: &[f64],
        target_speed: Option<f64>,
        latent: &LatentSource,
    ) -> Result<PolicyOutput> {
        if raster.size() != self.arch.raster_size {
            return Err(Error::Shape(format!(
                "raster is {}px, policy expects {}px",
                raster.size(),
                self.arch.raster_size
            )));
        }
        if h.len() != self.arch.hidden {
            return Err(Error::Shape(format!("recurrent state has {} dims, expected {}", h.len(), self.arch.hidden)));
        }
        let mut g = Graph::new(&self.params);
        let b = g.input(raster.to_chw());
        let hv = g.input(h.to_vec());
        let sv = g.input(vec![speed]);
        let out = self.step_graph(&mut g, b, sv, hv, target_speed, latent)?;
        let a = g.value(out.action);
        Ok(PolicyOutput {
            action: Action { accel: a[0], steer: a[1] },
            h_next: g.value(out.h_next).to_vec(),
            z: g.value(out.z).to_vec(),
            posterior: out.posterior.map(|(m, s)| (g.value(m).to_vec(), g.value(s).to_vec())),
        })
    }

    /// Posterior mean and standard deviation for a ground-truth action.
    pub fn posterior_params(
        &self,
        action: &Action,
        raster: &BirdviewRaster,
        speed: f64,
        h: &[f64],
        target_speed: Option<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let latent = LatentSource::Posterior { action: *action, eps: vec![0.0; self.arch.latent] };
        let out = self.step_values(raster, speed, h, target_speed, &latent)?;
        Ok(out.posterior.expect("posterior mode"))
    }
}

fn normalized_action(a: &Action) -> [f64; 2] {
    [a.accel / ACCEL_MAX, a.steer / STEER_MAX]
}

/// `gamma * x + beta`, elementwise.
pub fn film_transform(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    x.iter().zip(gamma).zip(beta).map(|((x, g), b)| g * x + b).collect()
}

/// Log density of `a` under a unit-covariance Gaussian centered on `mean`.
pub fn action_log_prob(a: &Action, mean: &Action) -> f64 {
    let da = a.accel - mean.accel;
    let ds = a.steer - mean.steer;
    -(2.0 * std::f64::consts::PI).ln() - 0.5 * (da * da + ds * ds)
}
