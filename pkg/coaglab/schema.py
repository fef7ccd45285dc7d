import graphene
from kinetics.schema import Query as KineticsQuery, Mutation as KineticsMutation

class Query(KineticsQuery, graphene.ObjectType):
    pass

class Mutation(KineticsMutation, graphene.ObjectType):
    pass

schema = graphene.Schema(query=Query, mutation=Mutation)
