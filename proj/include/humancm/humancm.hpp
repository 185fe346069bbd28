#pragma once

#include "humancm/common.hpp"
#include "humancm/spectral_codec.hpp"
#include "humancm/motion_data.hpp"
#include "humancm/tape.hpp"
#include "humancm/optim.hpp"
#include "humancm/denoiser.hpp"
#include "humancm/latent.hpp"
#include "humancm/diffusion.hpp"
#include "humancm/consistency.hpp"
#include "humancm/metrics.hpp"
#include "humancm/sampling.hpp"
#include "humancm/config.hpp"
#include "humancm/formats.hpp"
#include "humancm/commands.hpp"
