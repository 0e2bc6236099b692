# 标识轮换周期（秒）
ROTATION_PERIOD_S = 900

SECONDS_PER_DAY = 86400

# 24h / 15min
INTERVALS_PER_DAY = SECONDS_PER_DAY // ROTATION_PERIOD_S

# 手机端与服务端保留两周
RETENTION_DAYS = 14
RETENTION_SECONDS = RETENTION_DAYS * SECONDS_PER_DAY

# 去中心化方案的密钥批次发布周期
BATCH_PERIOD_S = SECONDS_PER_DAY

KEY_BYTES = 16
EID_BYTES = 16

# 距离估计的下限（米）
MIN_DISTANCE_M = 0.1
