#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <string>

namespace mabn {

/// Shortest round-trip decimal rendering of a double; identical inputs
/// give identical bytes in every CSV/JSON this library writes.
std::string fmt_double(double v);

struct TelemetryRow {
  int64_t epoch = 0;
  std::string phase;  // "joint" or "meta"
  int32_t domain_id = -1;
  double loss_ce = 0.0;
  double loss_ssl = 0.0;
  double loss_joint = 0.0;
  double lr = 0.0;
};

using TelemetrySink = std::function<void(const TelemetryRow&)>;

/// Append-only training telemetry with the fixed column order
/// epoch,phase,domain_id,loss_ce,loss_ssl,loss_joint,lr.
class TelemetryCsv {
 public:
  explicit TelemetryCsv(const std::string& path);
  void write(const TelemetryRow& row);
  TelemetrySink sink();

 private:
  std::ofstream out_;
};

}  // namespace mabn
