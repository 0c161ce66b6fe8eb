#pragma once

// torch's logging headers define CHECK; doctest needs the name.
#include <torch/torch.h>
#undef CHECK
#include <doctest.h>
