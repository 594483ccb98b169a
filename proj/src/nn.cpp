#include "hart/nn.hpp"

#include <cmath>

namespace hart {

Var kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return Var::leaf(Tensor::uniform(shape, rng, -bound, bound));
}

Conv2d Conv2d::init(const ConvSpec& spec, Rng& rng) {
  spec.validate();
  Conv2d c;
  c.spec = spec;
  const std::size_t fan_in = spec.in_channels / spec.groups * spec.kernel_size * spec.kernel_size;
  c.weight = kaiming_uniform(spec.weight_shape(), fan_in, rng);
  if (spec.bias) c.bias = Var::leaf(Tensor::zeros({spec.out_channels}));
  return c;
}

void Conv2d::zero() const {
  weight.mutable_value().fill(0.0);
  if (bias.defined()) bias.mutable_value().fill(0.0);
}

}  // namespace hart
