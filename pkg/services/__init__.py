# Judge, reward, training and evaluation services
