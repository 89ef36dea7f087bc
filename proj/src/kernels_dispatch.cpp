#include "fedtraj/kernels.hpp"

#include <cstdlib>
#include <string>

namespace fedtraj::kernels {
namespace {

const Backend* g_active = nullptr;

const Backend* pick(std::string_view name) {
  if (name == "scalar") return &kScalarBackend;
  if (name == "avx2") return &kAvx2Backend;
  return cpu_has_avx2() ? &kAvx2Backend : &kScalarBackend;
}

const Backend* init_from_env() {
  const char* env = std::getenv("FEDTRAJ_KERNELS");
  return pick(env ? std::string_view(env) : std::string_view("auto"));
}

}  // namespace

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Backend& active() {
  if (g_active == nullptr) g_active = init_from_env();
  return *g_active;
}

std::string_view backend_name() { return active().name; }

void force_backend(std::string_view name) { g_active = pick(name); }

}  // namespace fedtraj::kernels
