# Numerical services: kernels, variational family, training, metrics, persistence
