"""
st_instruct 时空指令微调系统

把门控空洞时间卷积编码器的输出投影进小型解码器语言模型的 token 流，
通过 <ST_HIS>/<ST_PRE> 特殊 token 完成时空预测的指令微调与零样本评估。
"""

__version__ = "0.1.0"
