#include "repud/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace repud {

ModelSpec ModelSpec::logreg(int dim, int classes) {
  ModelSpec s;
  s.arch = Arch::LogReg;
  s.logreg_dim = dim;
  s.classes = classes;
  s.validate();
  return s;
}

ModelSpec ModelSpec::mlp(std::vector<int> widths) {
  ModelSpec s;
  s.arch = Arch::Mlp;
  s.mlp_widths = std::move(widths);
  s.classes = s.mlp_widths.empty() ? 0 : s.mlp_widths.back();
  s.validate();
  return s;
}

ModelSpec ModelSpec::small_cnn(ImageShape input, std::vector<int> channels,
                               int classes) {
  ModelSpec s;
  s.arch = Arch::SmallCnn;
  s.cnn_input = input;
  s.cnn_channels = std::move(channels);
  s.classes = classes;
  s.validate();
  return s;
}

void ModelSpec::validate() const {
  if (classes < 2) throw std::invalid_argument("model: classes < 2");
  switch (arch) {
    case Arch::LogReg:
      if (logreg_dim < 1) throw std::invalid_argument("model: logreg dim < 1");
      break;
    case Arch::Mlp:
      if (mlp_widths.size() < 2) throw std::invalid_argument("model: mlp needs >= 2 widths");
      for (const int w : mlp_widths) {
        if (w < 1) throw std::invalid_argument("model: mlp width < 1");
      }
      if (mlp_widths.back() != classes) {
        throw std::invalid_argument("model: mlp output width != classes");
      }
      break;
    case Arch::SmallCnn: {
      if (!cnn_input.valid()) throw std::invalid_argument("model: cnn input shape");
      if (cnn_channels.empty()) throw std::invalid_argument("model: cnn channel plan");
      int h = cnn_input.height;
      int w = cnn_input.width;
      for (const int c : cnn_channels) {
        if (c < 1) throw std::invalid_argument("model: cnn channels < 1");
        h /= 2;
        w /= 2;
        if (h < 1 || w < 1) throw std::invalid_argument("model: cnn pools below 1x1");
      }
      break;
    }
  }
}

std::size_t ModelSpec::param_count() const {
  switch (arch) {
    case Arch::LogReg: {
      const std::size_t d = static_cast<std::size_t>(logreg_dim);
      if (classes == 2) return d + 1;  // single scoring row + bias
      return static_cast<std::size_t>(classes) * d + static_cast<std::size_t>(classes);
    }
    case Arch::Mlp: {
      std::size_t count = 0;
      for (std::size_t l = 0; l + 1 < mlp_widths.size(); ++l) {
        count += static_cast<std::size_t>(mlp_widths[l]) * mlp_widths[l + 1] +
                 static_cast<std::size_t>(mlp_widths[l + 1]);
      }
      return count;
    }
    case Arch::SmallCnn: {
      std::size_t count = 0;
      int cin = cnn_input.channels;
      int h = cnn_input.height;
      int w = cnn_input.width;
      for (const int cout : cnn_channels) {
        count += static_cast<std::size_t>(cout) * cin * 9 + static_cast<std::size_t>(cout);
        cin = cout;
        h /= 2;
        w /= 2;
      }
      const std::size_t flat = static_cast<std::size_t>(h) * w * cin;
      count += static_cast<std::size_t>(classes) * flat + static_cast<std::size_t>(classes);
      return count;
    }
  }
  return 0;
}

std::size_t ModelSpec::input_dim() const {
  switch (arch) {
    case Arch::LogReg:
      return static_cast<std::size_t>(logreg_dim);
    case Arch::Mlp:
      return static_cast<std::size_t>(mlp_widths.front());
    case Arch::SmallCnn:
      return cnn_input.pixel_count();
  }
  return 0;
}

std::string ModelSpec::describe() const {
  std::ostringstream os;
  switch (arch) {
    case Arch::LogReg:
      os << "logreg(d=" << logreg_dim << ",c=" << classes << ")";
      break;
    case Arch::Mlp:
      os << "mlp(";
      for (std::size_t i = 0; i < mlp_widths.size(); ++i) {
        os << (i ? "-" : "") << mlp_widths[i];
      }
      os << ")";
      break;
    case Arch::SmallCnn:
      os << "cnn(" << cnn_input.height << "x" << cnn_input.width << "x"
         << cnn_input.channels;
      for (const int c : cnn_channels) os << "-" << c;
      os << "-fc" << classes << ")";
      break;
  }
  return os.str();
}

void Hyperparams::validate() const {
  if (step_size <= 0) throw std::invalid_argument("hp: step_size <= 0");
  if (batch_size < 1) throw std::invalid_argument("hp: batch_size < 1");
  if (total_steps < 1) throw std::invalid_argument("hp: total_steps < 1");
  if (momentum < 0) throw std::invalid_argument("hp: momentum < 0");
  if (weight_decay < 0) throw std::invalid_argument("hp: weight_decay < 0");
  if (schedule == LrSchedule::CosineAnneal && lr_min < 0) {
    throw std::invalid_argument("hp: lr_min < 0");
  }
}

ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamVector params(spec.param_count());
  Rng rng = Rng::stream(seed, 0x1a17);
  std::size_t pos = 0;
  const auto fill = [&](std::size_t count, double fan_in) {
    const double scale = 1.0 / std::sqrt(fan_in);
    for (std::size_t i = 0; i < count; ++i) {
      params[pos++] = rng.uniform(-scale, scale);
    }
  };
  switch (spec.arch) {
    case Arch::LogReg: {
      const auto d = static_cast<std::size_t>(spec.logreg_dim);
      const std::size_t rows = spec.classes == 2 ? 1 : static_cast<std::size_t>(spec.classes);
      fill(rows * d + rows, static_cast<double>(d));
      break;
    }
    case Arch::Mlp:
      for (std::size_t l = 0; l + 1 < spec.mlp_widths.size(); ++l) {
        const auto in = static_cast<std::size_t>(spec.mlp_widths[l]);
        const auto out = static_cast<std::size_t>(spec.mlp_widths[l + 1]);
        fill(out * in + out, static_cast<double>(in));
      }
      break;
    case Arch::SmallCnn: {
      int cin = spec.cnn_input.channels;
      int h = spec.cnn_input.height;
      int w = spec.cnn_input.width;
      for (const int cout : spec.cnn_channels) {
        fill(static_cast<std::size_t>(cout) * cin * 9 + cout,
             static_cast<double>(cin) * 9.0);
        cin = cout;
        h /= 2;
        w /= 2;
      }
      const std::size_t flat = static_cast<std::size_t>(h) * w * cin;
      fill(static_cast<std::size_t>(spec.classes) * flat + spec.classes,
           static_cast<double>(flat));
      break;
    }
  }
  return params;
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void softmax_row(double* z, std::size_t c) {
  double mx = z[0];
  for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, z[k]);
  double sum = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    z[k] = std::exp(z[k] - mx);
    sum += z[k];
  }
  for (std::size_t k = 0; k < c; ++k) z[k] /= sum;
}

// ---- LogReg ----

void logreg_forward(const ParamVector& p, const ModelSpec& s, const double* x,
                    double* probs) {
  const auto d = static_cast<std::size_t>(s.logreg_dim);
  const auto c = static_cast<std::size_t>(s.classes);
  if (s.classes == 2) {
    double z = p[d];
    for (std::size_t j = 0; j < d; ++j) z += p[j] * x[j];
    const double p1 = sigmoid(z);
    probs[0] = 1.0 - p1;
    probs[1] = p1;
  } else {
    for (std::size_t k = 0; k < c; ++k) {
      double z = p[c * d + k];
      const double* wk = p.data() + k * d;
      for (std::size_t j = 0; j < d; ++j) z += wk[j] * x[j];
      probs[k] = z;
    }
    softmax_row(probs, c);
  }
}

// accumulates the per-sample gradient; probs is the forward output
void logreg_backward(const ParamVector&, const ModelSpec& s, const double* x,
                     int label, const double* probs, double* grad_acc) {
  const auto d = static_cast<std::size_t>(s.logreg_dim);
  const auto c = static_cast<std::size_t>(s.classes);
  if (s.classes == 2) {
    const double g = probs[1] - (label == 1 ? 1.0 : 0.0);
    for (std::size_t j = 0; j < d; ++j) grad_acc[j] += g * x[j];
    grad_acc[d] += g;
  } else {
    for (std::size_t k = 0; k < c; ++k) {
      const double g = probs[k] - (static_cast<int>(k) == label ? 1.0 : 0.0);
      double* wk = grad_acc + k * d;
      for (std::size_t j = 0; j < d; ++j) wk[j] += g * x[j];
      grad_acc[c * d + k] += g;
    }
  }
}

// ---- MLP ----

struct MlpScratch {
  std::vector<std::vector<double>> acts;   // acts[0] = input copy
  std::vector<std::vector<double>> prez;   // pre-activations per layer
  std::vector<double> delta, delta_next;
};

void mlp_forward_one(const ParamVector& p, const ModelSpec& s, const double* x,
                     MlpScratch& ws, double* probs) {
  const auto& widths = s.mlp_widths;
  const std::size_t layers = widths.size() - 1;
  ws.acts.resize(layers + 1);
  ws.prez.resize(layers);
  ws.acts[0].assign(x, x + widths[0]);
  std::size_t off = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto in = static_cast<std::size_t>(widths[l]);
    const auto out = static_cast<std::size_t>(widths[l + 1]);
    const double* W = p.data() + off;
    const double* b = p.data() + off + out * in;
    ws.prez[l].resize(out);
    const double* a = ws.acts[l].data();
    for (std::size_t o = 0; o < out; ++o) {
      double z = b[o];
      const double* wrow = W + o * in;
      for (std::size_t j = 0; j < in; ++j) z += wrow[j] * a[j];
      ws.prez[l][o] = z;
    }
    ws.acts[l + 1].resize(out);
    if (l + 1 < layers) {
      for (std::size_t o = 0; o < out; ++o) {
        ws.acts[l + 1][o] = ws.prez[l][o] > 0.0 ? ws.prez[l][o] : 0.0;
      }
    } else {
      ws.acts[l + 1] = ws.prez[l];
      softmax_row(ws.acts[l + 1].data(), out);
    }
    off += out * in + out;
  }
  const auto c = static_cast<std::size_t>(widths.back());
  for (std::size_t k = 0; k < c; ++k) probs[k] = ws.acts[layers][k];
}

void mlp_backward_one(const ParamVector& p, const ModelSpec& s, int label,
                      MlpScratch& ws, double* grad_acc) {
  const auto& widths = s.mlp_widths;
  const std::size_t layers = widths.size() - 1;
  std::vector<std::size_t> offs(layers);
  std::size_t off = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    offs[l] = off;
    off += static_cast<std::size_t>(widths[l + 1]) * widths[l] + widths[l + 1];
  }
  ws.delta = ws.acts[layers];
  ws.delta[static_cast<std::size_t>(label)] -= 1.0;
  for (std::size_t li = layers; li-- > 0;) {
    const auto in = static_cast<std::size_t>(widths[li]);
    const auto out = static_cast<std::size_t>(widths[li + 1]);
    const double* W = p.data() + offs[li];
    double* gW = grad_acc + offs[li];
    double* gb = grad_acc + offs[li] + out * in;
    const double* a = ws.acts[li].data();
    for (std::size_t o = 0; o < out; ++o) {
      const double dl = ws.delta[o];
      double* grow = gW + o * in;
      for (std::size_t j = 0; j < in; ++j) grow[j] += dl * a[j];
      gb[o] += dl;
    }
    if (li == 0) break;
    ws.delta_next.assign(in, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      const double dl = ws.delta[o];
      const double* wrow = W + o * in;
      for (std::size_t j = 0; j < in; ++j) ws.delta_next[j] += dl * wrow[j];
    }
    for (std::size_t j = 0; j < in; ++j) {
      if (ws.prez[li - 1][j] <= 0.0) ws.delta_next[j] = 0.0;
    }
    std::swap(ws.delta, ws.delta_next);
  }
}

// ---- SmallCnn ----

struct CnnDims {
  struct Stage {
    int cin, cout, h_in, w_in, h_out, w_out;  // h/w after pooling
    std::size_t w_off, b_off;
  };
  std::vector<Stage> stages;
  std::size_t fc_w_off, fc_b_off, flat;
};

CnnDims cnn_dims(const ModelSpec& s) {
  CnnDims d;
  int cin = s.cnn_input.channels;
  int h = s.cnn_input.height;
  int w = s.cnn_input.width;
  std::size_t off = 0;
  for (const int cout : s.cnn_channels) {
    CnnDims::Stage st;
    st.cin = cin;
    st.cout = cout;
    st.h_in = h;
    st.w_in = w;
    st.h_out = h / 2;
    st.w_out = w / 2;
    st.w_off = off;
    st.b_off = off + static_cast<std::size_t>(cout) * cin * 9;
    off = st.b_off + static_cast<std::size_t>(cout);
    d.stages.push_back(st);
    cin = cout;
    h = st.h_out;
    w = st.w_out;
  }
  d.flat = static_cast<std::size_t>(h) * w * cin;
  d.fc_w_off = off;
  d.fc_b_off = off + static_cast<std::size_t>(s.classes) * d.flat;
  return d;
}

struct CnnScratch {
  // per stage: conv pre-activation (h_in x w_in x cout), pooled output,
  // and argmax position of each pooled cell
  std::vector<std::vector<double>> conv;
  std::vector<std::vector<double>> pooled;
  std::vector<std::vector<std::uint32_t>> argmax;
  std::vector<double> dpool, dconv;
};

void cnn_forward_one(const ParamVector& p, const ModelSpec& s, const CnnDims& dims,
                     const double* x, CnnScratch& ws, double* probs) {
  const std::size_t nstage = dims.stages.size();
  ws.conv.resize(nstage);
  ws.pooled.resize(nstage);
  ws.argmax.resize(nstage);
  const double* input = x;
  for (std::size_t si = 0; si < nstage; ++si) {
    const auto& st = dims.stages[si];
    const std::size_t hw = static_cast<std::size_t>(st.h_in) * st.w_in;
    ws.conv[si].assign(hw * st.cout, 0.0);
    const double* W = p.data() + st.w_off;
    const double* b = p.data() + st.b_off;
    for (int y = 0; y < st.h_in; ++y) {
      for (int xx = 0; xx < st.w_in; ++xx) {
        for (int co = 0; co < st.cout; ++co) {
          const double* wk = W + (static_cast<std::size_t>(co) * st.cin) * 9;
          double acc = b[co];
          for (int ci = 0; ci < st.cin; ++ci) {
            const double* k9 = wk + static_cast<std::size_t>(ci) * 9;
            for (int dy = -1; dy <= 1; ++dy) {
              const int sy = y + dy;
              if (sy < 0 || sy >= st.h_in) continue;
              for (int dx = -1; dx <= 1; ++dx) {
                const int sx = xx + dx;
                if (sx < 0 || sx >= st.w_in) continue;
                acc += k9[(dy + 1) * 3 + (dx + 1)] *
                       input[(static_cast<std::size_t>(sy) * st.w_in + sx) * st.cin + ci];
              }
            }
          }
          ws.conv[si][(static_cast<std::size_t>(y) * st.w_in + xx) * st.cout + co] = acc;
        }
      }
    }
    // relu + 2x2 max pool; ties resolved to the first cell in scan order
    const std::size_t out_hw = static_cast<std::size_t>(st.h_out) * st.w_out;
    ws.pooled[si].resize(out_hw * st.cout);
    ws.argmax[si].resize(out_hw * st.cout);
    for (int y = 0; y < st.h_out; ++y) {
      for (int xx = 0; xx < st.w_out; ++xx) {
        for (int co = 0; co < st.cout; ++co) {
          double best = -1.0;  // relu output is >= 0
          std::uint32_t best_pos = 0;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t pos =
                  (static_cast<std::size_t>(2 * y + dy) * st.w_in + (2 * xx + dx)) *
                      st.cout +
                  co;
              const double v = std::max(ws.conv[si][pos], 0.0);
              if (v > best) {
                best = v;
                best_pos = static_cast<std::uint32_t>(pos);
              }
            }
          }
          const std::size_t opos = (static_cast<std::size_t>(y) * st.w_out + xx) * st.cout + co;
          ws.pooled[si][opos] = best;
          ws.argmax[si][opos] = best_pos;
        }
      }
    }
    input = ws.pooled[si].data();
  }
  const auto c = static_cast<std::size_t>(s.classes);
  const double* fcW = p.data() + dims.fc_w_off;
  const double* fcb = p.data() + dims.fc_b_off;
  for (std::size_t k = 0; k < c; ++k) {
    double z = fcb[k];
    const double* wrow = fcW + k * dims.flat;
    for (std::size_t j = 0; j < dims.flat; ++j) z += wrow[j] * input[j];
    probs[k] = z;
  }
  softmax_row(probs, c);
}

void cnn_backward_one(const ParamVector& p, const ModelSpec& s, const CnnDims& dims,
                      const double* x, int label, const double* probs,
                      CnnScratch& ws, double* grad_acc) {
  const auto c = static_cast<std::size_t>(s.classes);
  const std::size_t nstage = dims.stages.size();
  const double* last = nstage == 0 ? x : ws.pooled[nstage - 1].data();

  // fc
  ws.dpool.assign(dims.flat, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    const double dl = probs[k] - (static_cast<int>(k) == label ? 1.0 : 0.0);
    double* grow = grad_acc + dims.fc_w_off + k * dims.flat;
    const double* wrow = p.data() + dims.fc_w_off + k * dims.flat;
    for (std::size_t j = 0; j < dims.flat; ++j) {
      grow[j] += dl * last[j];
      ws.dpool[j] += dl * wrow[j];
    }
    grad_acc[dims.fc_b_off + k] += dl;
  }

  for (std::size_t si = nstage; si-- > 0;) {
    const auto& st = dims.stages[si];
    const std::size_t hw = static_cast<std::size_t>(st.h_in) * st.w_in;
    // un-pool into conv grad (through relu)
    ws.dconv.assign(hw * st.cout, 0.0);
    const std::size_t out_hw = static_cast<std::size_t>(st.h_out) * st.w_out;
    for (std::size_t o = 0; o < out_hw * st.cout; ++o) {
      const double g = ws.dpool[o];
      if (g == 0.0) continue;
      const std::uint32_t pos = ws.argmax[si][o];
      if (ws.conv[si][pos] > 0.0) ws.dconv[pos] += g;
    }
    const double* input = si == 0 ? x : ws.pooled[si - 1].data();
    const std::size_t in_dim = hw * static_cast<std::size_t>(st.cin);
    const bool need_dinput = si > 0;
    if (need_dinput) ws.dpool.assign(in_dim, 0.0);
    const double* W = p.data() + st.w_off;
    double* gW = grad_acc + st.w_off;
    double* gb = grad_acc + st.b_off;
    for (int y = 0; y < st.h_in; ++y) {
      for (int xx = 0; xx < st.w_in; ++xx) {
        for (int co = 0; co < st.cout; ++co) {
          const double g =
              ws.dconv[(static_cast<std::size_t>(y) * st.w_in + xx) * st.cout + co];
          if (g == 0.0) continue;
          gb[co] += g;
          for (int ci = 0; ci < st.cin; ++ci) {
            double* gk = gW + (static_cast<std::size_t>(co) * st.cin +
                               static_cast<std::size_t>(ci)) * 9;
            const double* wk = W + (static_cast<std::size_t>(co) * st.cin +
                                    static_cast<std::size_t>(ci)) * 9;
            for (int dy = -1; dy <= 1; ++dy) {
              const int sy = y + dy;
              if (sy < 0 || sy >= st.h_in) continue;
              for (int dx = -1; dx <= 1; ++dx) {
                const int sx = xx + dx;
                if (sx < 0 || sx >= st.w_in) continue;
                const std::size_t ipos =
                    (static_cast<std::size_t>(sy) * st.w_in + sx) * st.cin + ci;
                gk[(dy + 1) * 3 + (dx + 1)] += g * input[ipos];
                if (need_dinput) ws.dpool[ipos] += g * wk[(dy + 1) * 3 + (dx + 1)];
              }
            }
          }
        }
      }
    }
  }
}

double nll_from_probs(const double* probs, int label) {
  const double py = std::max(probs[label], 1e-300);
  return -std::log(py);
}

}  // namespace

void forward(const ParamVector& params, const ModelSpec& spec, const double* inputs,
             std::size_t rows, double* probs_out) {
  if (params.size() != spec.param_count()) {
    throw std::invalid_argument("forward: param size mismatch");
  }
  const std::size_t dim = spec.input_dim();
  const auto c = static_cast<std::size_t>(spec.classes);
  switch (spec.arch) {
    case Arch::LogReg:
      for (std::size_t i = 0; i < rows; ++i) {
        logreg_forward(params, spec, inputs + i * dim, probs_out + i * c);
      }
      break;
    case Arch::Mlp: {
      MlpScratch ws;
      for (std::size_t i = 0; i < rows; ++i) {
        mlp_forward_one(params, spec, inputs + i * dim, ws, probs_out + i * c);
      }
      break;
    }
    case Arch::SmallCnn: {
      const CnnDims dims = cnn_dims(spec);
      CnnScratch ws;
      for (std::size_t i = 0; i < rows; ++i) {
        cnn_forward_one(params, spec, dims, inputs + i * dim, ws, probs_out + i * c);
      }
      break;
    }
  }
}

std::vector<double> forward(const ParamVector& params, const ModelSpec& spec,
                            const std::vector<double>& inputs, std::size_t rows) {
  if (inputs.size() != rows * spec.input_dim()) {
    throw std::invalid_argument("forward: input size mismatch");
  }
  std::vector<double> probs(rows * static_cast<std::size_t>(spec.classes));
  forward(params, spec, inputs.data(), rows, probs.data());
  return probs;
}

LossGrad loss_and_grad(const ParamVector& params, const ModelSpec& spec,
                       const MiniBatchSpec& batch, const Dataset& ds,
                       double weight_decay) {
  if (params.size() != spec.param_count()) {
    throw std::invalid_argument("loss_and_grad: param size mismatch");
  }
  if (spec.input_dim() != ds.dim) {
    throw std::invalid_argument("loss_and_grad: dataset dim mismatch");
  }
  const std::size_t b = batch.size();
  if (b == 0) throw std::invalid_argument("loss_and_grad: empty batch");
  const std::vector<double> X = gather_batch(ds, batch);

  LossGrad out;
  out.grad.assign(params.size(), 0.0);
  const auto c = static_cast<std::size_t>(spec.classes);
  std::vector<double> probs(c);
  double loss_acc = 0.0;

  switch (spec.arch) {
    case Arch::LogReg:
      for (std::size_t i = 0; i < b; ++i) {
        const double* x = X.data() + i * ds.dim;
        const int y = ds.labels[batch.indices[i]];
        logreg_forward(params, spec, x, probs.data());
        loss_acc += nll_from_probs(probs.data(), y);
        logreg_backward(params, spec, x, y, probs.data(), out.grad.data());
      }
      break;
    case Arch::Mlp: {
      MlpScratch ws;
      for (std::size_t i = 0; i < b; ++i) {
        const double* x = X.data() + i * ds.dim;
        const int y = ds.labels[batch.indices[i]];
        mlp_forward_one(params, spec, x, ws, probs.data());
        loss_acc += nll_from_probs(probs.data(), y);
        mlp_backward_one(params, spec, y, ws, out.grad.data());
      }
      break;
    }
    case Arch::SmallCnn: {
      const CnnDims dims = cnn_dims(spec);
      CnnScratch ws;
      for (std::size_t i = 0; i < b; ++i) {
        const double* x = X.data() + i * ds.dim;
        const int y = ds.labels[batch.indices[i]];
        cnn_forward_one(params, spec, dims, x, ws, probs.data());
        loss_acc += nll_from_probs(probs.data(), y);
        cnn_backward_one(params, spec, dims, x, y, probs.data(), ws, out.grad.data());
      }
      break;
    }
  }

  const double inv_b = 1.0 / static_cast<double>(b);
  for (auto& g : out.grad) g *= inv_b;
  out.loss = loss_acc * inv_b;
  if (weight_decay != 0.0) {
    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.grad[i] += 2.0 * weight_decay * params[i];
      sq += params[i] * params[i];
    }
    out.loss += weight_decay * sq;
  }
  return out;
}

double batch_loss(const ParamVector& params, const ModelSpec& spec,
                  const MiniBatchSpec& batch, const Dataset& ds,
                  double weight_decay) {
  const std::size_t b = batch.size();
  if (b == 0) throw std::invalid_argument("batch_loss: empty batch");
  const std::vector<double> X = gather_batch(ds, batch);
  const auto c = static_cast<std::size_t>(spec.classes);
  std::vector<double> probs(b * c);
  forward(params, spec, X.data(), b, probs.data());
  double loss_acc = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    loss_acc += nll_from_probs(probs.data() + i * c, ds.labels[batch.indices[i]]);
  }
  double loss = loss_acc / static_cast<double>(b);
  if (weight_decay != 0.0) {
    double sq = 0.0;
    for (const double v : params) sq += v * v;
    loss += weight_decay * sq;
  }
  return loss;
}

double sample_loss(const ParamVector& params, const ModelSpec& spec, const double* x,
                   int label) {
  const auto c = static_cast<std::size_t>(spec.classes);
  std::vector<double> probs(c);
  forward(params, spec, x, 1, probs.data());
  return nll_from_probs(probs.data(), label);
}

ParamVector sgd_step(const ParamVector& params, const ParamVector& grad,
                     double step_size) {
  if (params.size() != grad.size()) throw std::invalid_argument("sgd_step: size mismatch");
  ParamVector out(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    out[i] = params[i] - step_size * grad[i];
  }
  return out;
}

std::pair<ParamVector, OptimizerState> modified_sgd_step(const ParamVector& params,
                                                         const ParamVector& grad,
                                                         OptimizerState state,
                                                         const Hyperparams& hp) {
  if (state.velocity.size() != params.size() || grad.size() != params.size()) {
    throw std::invalid_argument("modified_sgd_step: size mismatch");
  }
  const double lr = lr_at(state.step_index, hp);
  if (hp.momentum == 0.0) {
    state.velocity = grad;  // exact reduction to plain SGD
  } else {
    for (std::size_t i = 0; i < grad.size(); ++i) {
      state.velocity[i] = hp.momentum * state.velocity[i] + grad[i];
    }
  }
  ParamVector out = sgd_step(params, state.velocity, lr);
  state.step_index += 1;
  return {std::move(out), std::move(state)};
}

double lr_at(long long t, const Hyperparams& hp) {
  if (t < 0 || t > hp.total_steps) throw std::out_of_range("lr_at: t out of [0, tau]");
  switch (hp.schedule) {
    case LrSchedule::Constant:
      return hp.step_size;
    case LrSchedule::CosineAnneal: {
      const double frac = static_cast<double>(t) / static_cast<double>(hp.total_steps);
      return hp.lr_min +
             0.5 * (hp.step_size - hp.lr_min) * (1.0 + std::cos(3.141592653589793 * frac));
    }
  }
  return hp.step_size;
}

}  // namespace repud
