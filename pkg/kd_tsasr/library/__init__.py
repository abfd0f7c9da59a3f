"""kd_tsasr library module"""
