#pragma once

// CSV emission for loss traces, anomaly score traces and latent-parameter
// tables: comma separated, header row, '.' decimal point.

#include <string>
#include <vector>

#include "bruno/tasks.hpp"

namespace bruno {

void write_loss_csv(const std::string& path, const std::vector<double>& trace);
void write_score_csv(const std::string& path, const ScoreTrace& trace);
void write_latent_csv(const std::string& path, const LatentReport& report);

}  // namespace bruno
