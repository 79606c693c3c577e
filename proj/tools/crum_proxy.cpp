#include <CLI11.hpp>

#include "crum/proxy/proxy_session.hpp"

int main(int argc, char** argv) {
  CLI::App app{"crum-proxy: owns the simulated device and serves one application"};
  std::string shm;
  app.add_option("--shm", shm, "shared region name")->required();
  CLI11_PARSE(app, argc, argv);
  return crum::proxy::proxy_main(shm);
}
