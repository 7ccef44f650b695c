#include "csipred/tensor.hpp"

namespace csipred {

namespace {
thread_local GradTape t_tape;
thread_local bool t_grad_enabled = true;
}  // namespace

GradTape& tape() { return t_tape; }

bool grad_enabled() { return t_grad_enabled; }

void detail::set_grad_enabled(bool v) { t_grad_enabled = v; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

}  // namespace csipred
