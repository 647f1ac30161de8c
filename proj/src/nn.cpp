#include "genreplay/nn.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "genreplay/errors.hpp"

namespace genreplay {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

namespace {

// He-uniform fan-in initialization.
void init_uniform(Tensor& w, int fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / std::max(1, fan_in));
  for (int i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
}

int conv_out_dim(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// Gathers k*k patches of `src` (C, Hb, Wb) at the stride grid of a (Hs, Ws)
// small side into col (C*k*k, Hs*Ws). Shared by conv forward and transposed
// conv backward.
void im2col(const double* src, int C, int Hb, int Wb, int Hs, int Ws, int k, int stride, int pad,
            double* col) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        double* dst = col + ((static_cast<size_t>(c) * k + kh) * k + kw) * (static_cast<size_t>(Hs) * Ws);
        for (int hs = 0; hs < Hs; ++hs) {
          int hb = hs * stride - pad + kh;
          if (hb < 0 || hb >= Hb) {
            for (int ws = 0; ws < Ws; ++ws) *dst++ = 0.0;
            continue;
          }
          const double* row = src + (static_cast<size_t>(c) * Hb + hb) * Wb;
          for (int ws = 0; ws < Ws; ++ws) {
            int wb = ws * stride - pad + kw;
            *dst++ = (wb >= 0 && wb < Wb) ? row[wb] : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds col back into dst (C, Hb, Wb).
void col2im(const double* col, int C, int Hb, int Wb, int Hs, int Ws, int k, int stride, int pad,
            double* dst) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const double* srcp =
            col + ((static_cast<size_t>(c) * k + kh) * k + kw) * (static_cast<size_t>(Hs) * Ws);
        for (int hs = 0; hs < Hs; ++hs) {
          int hb = hs * stride - pad + kh;
          if (hb < 0 || hb >= Hb) {
            srcp += Ws;
            continue;
          }
          double* row = dst + (static_cast<size_t>(c) * Hb + hb) * Wb;
          for (int ws = 0; ws < Ws; ++ws) {
            int wb = ws * stride - pad + kw;
            if (wb >= 0 && wb < Wb) row[wb] += srcp[ws];
          }
          srcp += Ws;
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng)
    : in_ch(in_ch),
      out_ch(out_ch),
      kernel(kernel),
      stride(stride),
      pad(pad),
      weight({out_ch, in_ch, kernel, kernel}),
      bias({out_ch}),
      gweight({out_ch, in_ch, kernel, kernel}),
      gbias({out_ch}) {
  init_uniform(weight, in_ch * kernel * kernel, rng);
}

Tensor Conv2d::forward(const Tensor& x, Mode) {
  if (x.ndim() != 4 || x.dim(1) != in_ch)
    throw DimensionError("conv2d: expected (N," + std::to_string(in_ch) + ",H,W), got " +
                         x.shape_str());
  input_ = x;
  int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  int oh = conv_out_dim(h, kernel, stride, pad), ow = conv_out_dim(w, kernel, stride, pad);
  Tensor out({n, out_ch, oh, ow});
  int patch = in_ch * kernel * kernel;
  std::vector<double> col(static_cast<size_t>(patch) * oh * ow);
  ConstMapRM wmat(weight.data(), out_ch, patch);
  for (int i = 0; i < n; ++i) {
    im2col(x.data() + static_cast<size_t>(i) * in_ch * h * w, in_ch, h, w, oh, ow, kernel, stride,
           pad, col.data());
    ConstMapRM cmat(col.data(), patch, oh * ow);
    MapRM omat(out.data() + static_cast<size_t>(i) * out_ch * oh * ow, out_ch, oh * ow);
    omat.noalias() = wmat * cmat;
    for (int c = 0; c < out_ch; ++c) omat.row(c).array() += bias[c];
  }
  return out;
}

Tensor Conv2d::backward(const Tensor& gy) {
  const Tensor& x = input_;
  int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  int oh = gy.dim(2), ow = gy.dim(3);
  int patch = in_ch * kernel * kernel;
  Tensor gx(x.shape());
  std::vector<double> col(static_cast<size_t>(patch) * oh * ow);
  std::vector<double> gcol(static_cast<size_t>(patch) * oh * ow);
  ConstMapRM wmat(weight.data(), out_ch, patch);
  MapRM gwmat(gweight.data(), out_ch, patch);
  for (int i = 0; i < n; ++i) {
    ConstMapRM gymat(gy.data() + static_cast<size_t>(i) * out_ch * oh * ow, out_ch, oh * ow);
    im2col(x.data() + static_cast<size_t>(i) * in_ch * h * w, in_ch, h, w, oh, ow, kernel, stride,
           pad, col.data());
    ConstMapRM cmat(col.data(), patch, oh * ow);
    gwmat.noalias() += gymat * cmat.transpose();
    for (int c = 0; c < out_ch; ++c) gbias[c] += gymat.row(c).sum();
    MapRM gcmat(gcol.data(), patch, oh * ow);
    gcmat.noalias() = wmat.transpose() * gymat;
    col2im(gcol.data(), in_ch, h, w, oh, ow, kernel, stride, pad,
           gx.data() + static_cast<size_t>(i) * in_ch * h * w);
  }
  return gx;
}

// ---------------------------------------------------------------------------
// ConvTranspose2d

ConvTranspose2d::ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride, int pad,
                                 int out_pad, Rng& rng)
    : in_ch(in_ch),
      out_ch(out_ch),
      kernel(kernel),
      stride(stride),
      pad(pad),
      out_pad(out_pad),
      weight({in_ch, out_ch, kernel, kernel}),
      bias({out_ch}),
      gweight({in_ch, out_ch, kernel, kernel}),
      gbias({out_ch}) {
  init_uniform(weight, out_ch * kernel * kernel, rng);
}

Tensor ConvTranspose2d::forward(const Tensor& x, Mode) {
  if (x.ndim() != 4 || x.dim(1) != in_ch)
    throw DimensionError("conv_transpose2d: expected (N," + std::to_string(in_ch) + ",H,W), got " +
                         x.shape_str());
  input_ = x;
  int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  int oh = (h - 1) * stride - 2 * pad + kernel + out_pad;
  int ow = (w - 1) * stride - 2 * pad + kernel + out_pad;
  Tensor out({n, out_ch, oh, ow});
  int patch = out_ch * kernel * kernel;
  std::vector<double> col(static_cast<size_t>(patch) * h * w);
  ConstMapRM wmat(weight.data(), in_ch, patch);
  for (int i = 0; i < n; ++i) {
    ConstMapRM xmat(x.data() + static_cast<size_t>(i) * in_ch * h * w, in_ch, h * w);
    MapRM cmat(col.data(), patch, h * w);
    cmat.noalias() = wmat.transpose() * xmat;
    double* oimg = out.data() + static_cast<size_t>(i) * out_ch * oh * ow;
    col2im(col.data(), out_ch, oh, ow, h, w, kernel, stride, pad, oimg);
    MapRM omat(oimg, out_ch, oh * ow);
    for (int c = 0; c < out_ch; ++c) omat.row(c).array() += bias[c];
  }
  return out;
}

Tensor ConvTranspose2d::backward(const Tensor& gy) {
  const Tensor& x = input_;
  int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  int oh = gy.dim(2), ow = gy.dim(3);
  int patch = out_ch * kernel * kernel;
  Tensor gx(x.shape());
  std::vector<double> gcol(static_cast<size_t>(patch) * h * w);
  ConstMapRM wmat(weight.data(), in_ch, patch);
  MapRM gwmat(gweight.data(), in_ch, patch);
  for (int i = 0; i < n; ++i) {
    im2col(gy.data() + static_cast<size_t>(i) * out_ch * oh * ow, out_ch, oh, ow, h, w, kernel,
           stride, pad, gcol.data());
    ConstMapRM gcmat(gcol.data(), patch, h * w);
    ConstMapRM xmat(x.data() + static_cast<size_t>(i) * in_ch * h * w, in_ch, h * w);
    MapRM gxmat(gx.data() + static_cast<size_t>(i) * in_ch * h * w, in_ch, h * w);
    gxmat.noalias() = wmat * gcmat;
    gwmat.noalias() += xmat * gcmat.transpose();
    ConstMapRM gymat(gy.data() + static_cast<size_t>(i) * out_ch * oh * ow, out_ch, oh * ow);
    for (int c = 0; c < out_ch; ++c) gbias[c] += gymat.row(c).sum();
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(int in_features, int out_features, Rng& rng)
    : in_features(in_features),
      out_features(out_features),
      weight({out_features, in_features}),
      bias({out_features}),
      gweight({out_features, in_features}),
      gbias({out_features}) {
  init_uniform(weight, in_features, rng);
}

Tensor Linear::forward(const Tensor& x, Mode) {
  if (x.ndim() != 2 || x.dim(1) != in_features)
    throw DimensionError("linear: expected (N," + std::to_string(in_features) + "), got " +
                         x.shape_str());
  input_ = x;
  int n = x.dim(0);
  Tensor out({n, out_features});
  ConstMapRM xm(x.data(), n, in_features);
  ConstMapRM wm(weight.data(), out_features, in_features);
  MapRM om(out.data(), n, out_features);
  om.noalias() = xm * wm.transpose();
  for (int c = 0; c < out_features; ++c) om.col(c).array() += bias[c];
  return out;
}

Tensor Linear::backward(const Tensor& gy) {
  int n = input_.dim(0);
  Tensor gx(input_.shape());
  ConstMapRM gym(gy.data(), n, out_features);
  ConstMapRM xm(input_.data(), n, in_features);
  ConstMapRM wm(weight.data(), out_features, in_features);
  MapRM gwm(gweight.data(), out_features, in_features);
  MapRM gxm(gx.data(), n, in_features);
  gwm.noalias() += gym.transpose() * xm;
  for (int c = 0; c < out_features; ++c) gbias[c] += gym.col(c).sum();
  gxm.noalias() = gym * wm;
  return gx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels, double momentum, double eps)
    : channels(channels),
      momentum(momentum),
      eps(eps),
      gamma(Tensor::full({channels}, 1.0)),
      beta({channels}),
      ggamma({channels}),
      gbeta({channels}),
      running_mean({channels}),
      running_var(Tensor::full({channels}, 1.0)) {}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  if (x.ndim() != 4 || x.dim(1) != channels)
    throw DimensionError("batchnorm2d: expected (N," + std::to_string(channels) + ",H,W), got " +
                         x.shape_str());
  input_ = x;
  mode_ = mode;
  int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  int m = n * h * w;
  batch_mean_ = Tensor({channels});
  batch_var_ = Tensor({channels});
  for (int c = 0; c < channels; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double* p = x.data() + ((static_cast<size_t>(i) * channels + c) * h) * w;
      for (int j = 0; j < h * w; ++j) {
        sum += p[j];
        sq += p[j] * p[j];
      }
    }
    double mean = sum / m;
    batch_mean_[c] = mean;
    batch_var_[c] = sq / m - mean * mean;
    if (batch_var_[c] < 0.0) batch_var_[c] = 0.0;  // guard fp cancellation
  }
  const Tensor& mu = (mode == Mode::Train) ? batch_mean_ : running_mean;
  const Tensor& var = (mode == Mode::Train) ? batch_var_ : running_var;
  Tensor out(x.shape());
  for (int c = 0; c < channels; ++c) {
    double inv_std = 1.0 / std::sqrt(var[c] + eps);
    double a = gamma[c] * inv_std;
    double b = beta[c] - a * mu[c];
    for (int i = 0; i < n; ++i) {
      const double* p = x.data() + ((static_cast<size_t>(i) * channels + c) * h) * w;
      double* q = out.data() + ((static_cast<size_t>(i) * channels + c) * h) * w;
      for (int j = 0; j < h * w; ++j) q[j] = a * p[j] + b;
    }
  }
  if (mode == Mode::Train) {
    for (int c = 0; c < channels; ++c) {
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * batch_mean_[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * batch_var_[c];
    }
  }
  return out;
}

void BatchNorm2d::set_stat_grads(Tensor dmean, Tensor dvar) {
  stat_gmean_ = std::move(dmean);
  stat_gvar_ = std::move(dvar);
}

Tensor BatchNorm2d::backward(const Tensor& gy) {
  const Tensor& x = input_;
  int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  int m = n * h * w;
  Tensor gx(x.shape());
  const Tensor& mu = (mode_ == Mode::Train) ? batch_mean_ : running_mean;
  const Tensor& var = (mode_ == Mode::Train) ? batch_var_ : running_var;
  for (int c = 0; c < channels; ++c) {
    double inv_std = 1.0 / std::sqrt(var[c] + eps);
    // Parameter grads use the normalization actually applied in forward.
    double sum_gy = 0.0, sum_gy_xhat = 0.0;
    for (int i = 0; i < n; ++i) {
      const double* gp = gy.data() + ((static_cast<size_t>(i) * channels + c) * h) * w;
      const double* xp = x.data() + ((static_cast<size_t>(i) * channels + c) * h) * w;
      for (int j = 0; j < h * w; ++j) {
        sum_gy += gp[j];
        sum_gy_xhat += gp[j] * (xp[j] - mu[c]) * inv_std;
      }
    }
    ggamma[c] += sum_gy_xhat;
    gbeta[c] += sum_gy;

    double inj_dmu = stat_gmean_ ? (*stat_gmean_)[c] : 0.0;
    double inj_dvar = stat_gvar_ ? (*stat_gvar_)[c] : 0.0;
    if (mode_ == Mode::Train) {
      // Batch statistics participate in the normalization.
      // sum gy*(x-mu) == sum_gy_xhat / inv_std.
      double dvar = -0.5 * gamma[c] * sum_gy_xhat * inv_std * inv_std + inj_dvar;
      double dmu = -gamma[c] * inv_std * sum_gy + inj_dmu;
      for (int i = 0; i < n; ++i) {
        const double* gp = gy.data() + ((static_cast<size_t>(i) * channels + c) * h) * w;
        const double* xp = x.data() + ((static_cast<size_t>(i) * channels + c) * h) * w;
        double* op = gx.data() + ((static_cast<size_t>(i) * channels + c) * h) * w;
        for (int j = 0; j < h * w; ++j) {
          op[j] = gamma[c] * inv_std * gp[j] + dvar * 2.0 * (xp[j] - mu[c]) / m + dmu / m;
        }
      }
    } else {
      // Stored statistics are constants; only injected stat grads couple the
      // input to its batch statistics.
      double bmu = batch_mean_[c];
      for (int i = 0; i < n; ++i) {
        const double* gp = gy.data() + ((static_cast<size_t>(i) * channels + c) * h) * w;
        const double* xp = x.data() + ((static_cast<size_t>(i) * channels + c) * h) * w;
        double* op = gx.data() + ((static_cast<size_t>(i) * channels + c) * h) * w;
        for (int j = 0; j < h * w; ++j) {
          op[j] = gamma[c] * inv_std * gp[j] + inj_dvar * 2.0 * (xp[j] - bmu) / m + inj_dmu / m;
        }
      }
    }
  }
  stat_gmean_.reset();
  stat_gvar_.reset();
  return gx;
}

// ---------------------------------------------------------------------------
// Activations

Tensor ReLU::forward(const Tensor& x, Mode) {
  input_ = x;
  Tensor out(x.shape());
  for (int i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

Tensor ReLU::backward(const Tensor& gy) {
  Tensor gx(input_.shape());
  for (int i = 0; i < gx.size(); ++i) gx[i] = input_[i] > 0.0 ? gy[i] : 0.0;
  return gx;
}

Tensor LeakyReLU::forward(const Tensor& x, Mode) {
  input_ = x;
  Tensor out(x.shape());
  for (int i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : slope * x[i];
  return out;
}

Tensor LeakyReLU::backward(const Tensor& gy) {
  Tensor gx(input_.shape());
  for (int i = 0; i < gx.size(); ++i) gx[i] = input_[i] > 0.0 ? gy[i] : slope * gy[i];
  return gx;
}

Tensor Tanh::forward(const Tensor& x, Mode) {
  Tensor out(x.shape());
  for (int i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  output_ = out;
  return out;
}

Tensor Tanh::backward(const Tensor& gy) {
  Tensor gx(output_.shape());
  for (int i = 0; i < gx.size(); ++i) gx[i] = gy[i] * (1.0 - output_[i] * output_[i]);
  return gx;
}

// ---------------------------------------------------------------------------
// GlobalAvgPool / Reshape

Tensor GlobalAvgPool::forward(const Tensor& x, Mode) {
  if (x.ndim() != 4) throw DimensionError("global_avg_pool expects NCHW, got " + x.shape_str());
  in_shape_ = x.shape();
  int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double* p = x.data() + (static_cast<size_t>(i) * c + ch) * hw;
      double s = 0.0;
      for (int j = 0; j < hw; ++j) s += p[j];
      out.at(i, ch) = s / hw;
    }
  return out;
}

Tensor GlobalAvgPool::backward(const Tensor& gy) {
  int n = in_shape_[0], c = in_shape_[1], hw = in_shape_[2] * in_shape_[3];
  Tensor gx(in_shape_);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      double g = gy.at(i, ch) / hw;
      double* p = gx.data() + (static_cast<size_t>(i) * c + ch) * hw;
      for (int j = 0; j < hw; ++j) p[j] = g;
    }
  return gx;
}

Tensor Reshape::forward(const Tensor& x, Mode) {
  in_shape_ = x.shape();
  std::vector<int> s;
  s.push_back(x.dim(0));
  for (int d : dims_) s.push_back(d);
  return x.reshaped(std::move(s));
}

Tensor Reshape::backward(const Tensor& gy) { return gy.reshaped(in_shape_); }

// ---------------------------------------------------------------------------
// Sequential / ResidualBlock

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& layer : layers) h = layer->forward(h, mode);
  return h;
}

Tensor Sequential::backward(const Tensor& gy) {
  Tensor g = gy;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Sequential::for_each(const std::function<void(Layer&)>& fn) {
  fn(*this);
  for (auto& layer : layers) layer->for_each(fn);
}

ResidualBlock::ResidualBlock(int in_ch, int out_ch, int stride, Rng& rng)
    : conv1_(in_ch, out_ch, 3, stride, 1, rng),
      bn1_(out_ch),
      conv2_(out_ch, out_ch, 3, 1, 1, rng),
      bn2_(out_ch) {
  if (stride != 1 || in_ch != out_ch) {
    proj_ = std::make_unique<Conv2d>(in_ch, out_ch, 1, stride, 0, rng);
    proj_bn_ = std::make_unique<BatchNorm2d>(out_ch);
  }
}

Tensor ResidualBlock::forward(const Tensor& x, Mode mode) {
  Tensor h = relu1_.forward(bn1_.forward(conv1_.forward(x, mode), mode), mode);
  Tensor main = bn2_.forward(conv2_.forward(h, mode), mode);
  Tensor shortcut = proj_ ? proj_bn_->forward(proj_->forward(x, mode), mode) : x;
  sum_ = main;
  sum_ += shortcut;
  Tensor out(sum_.shape());
  for (int i = 0; i < out.size(); ++i) out[i] = sum_[i] > 0.0 ? sum_[i] : 0.0;
  return out;
}

Tensor ResidualBlock::backward(const Tensor& gy) {
  Tensor gsum(sum_.shape());
  for (int i = 0; i < gsum.size(); ++i) gsum[i] = sum_[i] > 0.0 ? gy[i] : 0.0;
  Tensor gmain = conv1_.backward(bn1_.backward(relu1_.backward(
      conv2_.backward(bn2_.backward(gsum)))));
  if (proj_) {
    Tensor gshort = proj_->backward(proj_bn_->backward(gsum));
    gmain += gshort;
  } else {
    gmain += gsum;
  }
  return gmain;
}

void ResidualBlock::for_each(const std::function<void(Layer&)>& fn) {
  fn(*this);
  conv1_.for_each(fn);
  bn1_.for_each(fn);
  relu1_.for_each(fn);
  conv2_.for_each(fn);
  bn2_.for_each(fn);
  if (proj_) {
    proj_->for_each(fn);
    proj_bn_->for_each(fn);
  }
}

// ---------------------------------------------------------------------------
// Module helpers

std::vector<Tensor*> collect_params(Layer& root) {
  std::vector<Tensor*> ps, gs;
  root.for_each([&](Layer& l) { l.collect_params(ps, gs); });
  return ps;
}

std::vector<Tensor*> collect_grads(Layer& root) {
  std::vector<Tensor*> ps, gs;
  root.for_each([&](Layer& l) { l.collect_params(ps, gs); });
  return gs;
}

std::vector<Tensor*> collect_state(Layer& root) {
  std::vector<Tensor*> st;
  root.for_each([&](Layer& l) { l.collect_state(st); });
  return st;
}

std::vector<BatchNorm2d*> collect_bn_layers(Layer& root) {
  std::vector<BatchNorm2d*> bns;
  root.for_each([&](Layer& l) {
    if (auto* bn = dynamic_cast<BatchNorm2d*>(&l)) bns.push_back(bn);
  });
  return bns;
}

void zero_grads(Layer& root) {
  for (Tensor* g : collect_grads(root)) g->zero();
}

int param_count(Layer& root) {
  int n = 0;
  for (Tensor* p : collect_params(root)) n += p->size();
  return n;
}

}  // namespace genreplay
