#include "test_support.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace flowibr::testing {

using diff::ParamStore;
using diff::Tape;
using diff::Var;

GradCheckResult check_gradient(ParamStore& store, const std::function<Var(Tape&)>& build, double h,
                               double floor, std::size_t max_elements, std::uint64_t pick_seed) {
  store.zero_grad();
  std::uint64_t base_sig = 0;
  {
    Tape tape;
    const Var out = build(tape);
    base_sig = tape.kink_signature();
    tape.backward(out, store);
  }
  const std::vector<double> grads = store.flat_grads();
  std::vector<double> values = store.flat_values();
  store.zero_grad();

  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  if (max_elements > 0 && max_elements < order.size()) {
    std::mt19937_64 rng(pick_seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(max_elements);
  }

  auto eval = [&](std::uint64_t* sig) {
    Tape tape;
    const Var out = build(tape);
    *sig = tape.kink_signature();
    return tape.scalar(out);
  };

  GradCheckResult r;
  for (std::size_t i : order) {
    const double x = values[i];
    std::uint64_t sp = 0, sm = 0;
    values[i] = x + h;
    store.set_flat_values(values);
    const double fp = eval(&sp);
    values[i] = x - h;
    store.set_flat_values(values);
    const double fm = eval(&sm);
    values[i] = x;
    store.set_flat_values(values);
    if (sp != base_sig || sm != base_sig) {
      ++r.skipped_kinks;
      continue;
    }
    const double fd = (fp - fm) / (2.0 * h);
    const double g = grads[i];
    const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), floor});
    ++r.checked;
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      std::ostringstream os;
      os.precision(10);
      os << "element " << i << ": reverse " << g << " vs central " << fd;
      r.worst = os.str();
    }
  }
  return r;
}

FlowField random_field(std::uint64_t seed, int frames, int frequencies, int width, double scale,
                       int window) {
  FlowFieldConfig cfg;
  cfg.num_frames = frames;
  cfg.width = width;
  cfg.encoding.frequencies = frequencies;
  cfg.window = window;
  FlowField field(cfg, seed);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v = field.params().flat_values();
  for (double& x : v) x = n(rng);
  field.params().set_flat_values(v);
  return field;
}

double max_abs_diff(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  }
  return m;
}

double param_norm2(const ParamStore& store) {
  double s = 0.0;
  for (double v : store.flat_values()) s += v * v;
  return s;
}

}  // namespace flowibr::testing
