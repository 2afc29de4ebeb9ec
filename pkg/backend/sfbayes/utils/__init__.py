# Algorithms: sampler, prediction, synthetic data, metrics, preprocessing, file formats, studies
