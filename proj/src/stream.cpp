#include "crl/stream.hpp"

#include <stdexcept>

namespace crl::stream {

envs::Dataset resolve_dataset(const TaskSpec& task) {
    if (task.dataset_path) {
        auto ds = envs::load_dataset(*task.dataset_path);
        if (ds.layout != task.layout || ds.transform != task.transform)
            throw std::runtime_error("dataset " + *task.dataset_path + " is for " + ds.layout +
                                     "-" + ds.transform + ", stream expects " + task.label());
        return ds;
    }
    if (!task.generate)
        throw std::runtime_error("task " + task.label() +
                                 " has neither a dataset path nor a generation recipe");
    return envs::gen_dataset(task.maze(), task.tf(), task.horizon_or_default(),
                             task.generate->episodes, task.generate->seed,
                             task.generate->noise_std);
}

}  // namespace crl::stream
