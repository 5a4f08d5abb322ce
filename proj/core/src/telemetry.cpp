#include "mabn/telemetry.hpp"

#include <charconv>

#include "mabn/errors.hpp"

namespace mabn {

std::string fmt_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw Error("double formatting failed");
  return std::string(buf, ptr);
}

TelemetryCsv::TelemetryCsv(const std::string& path) : out_(path, std::ios::trunc) {
  if (!out_) throw IoError("cannot open telemetry file '" + path + "'");
  out_ << "epoch,phase,domain_id,loss_ce,loss_ssl,loss_joint,lr\n";
}

void TelemetryCsv::write(const TelemetryRow& row) {
  out_ << row.epoch << ',' << row.phase << ',' << row.domain_id << ',' << fmt_double(row.loss_ce)
       << ',' << fmt_double(row.loss_ssl) << ',' << fmt_double(row.loss_joint) << ','
       << fmt_double(row.lr) << '\n';
  if (!out_) throw IoError("telemetry write failed");
}

TelemetrySink TelemetryCsv::sink() {
  return [this](const TelemetryRow& row) { write(row); };
}

}  // namespace mabn
